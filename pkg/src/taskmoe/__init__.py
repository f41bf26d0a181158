"""Task-level mixture-of-experts NMT on toy cipher languages."""

from .bleu import BleuReport, corpus_bleu
from .corpus import CorpusSpec, ParallelExample, gen_corpus, load_tsv
from .model import DenseModel, MoeConfig, MoeModel, RoutingDecision, param_count
from .tasks import Strategy, TaskMode, TaskRegistry, build_registry, resolve_infer, resolve_train
from .vocab import Vocab, build_vocab, decode, encode_source, encode_target

__version__ = "0.1.0"
