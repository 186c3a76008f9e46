"""corpustune: adapt a retrieval bi-encoder to a corpus via LLM distillation.

The pipeline generates queries over an unlabeled corpus, has a teacher model
judge query-chunk relevance, mines contrastive triples guided by the current
student's retrieval, retrains the student with triplet loss, and evaluates
with IR metrics under a budget-aware adaptive protocol.
"""

from .corpus import Chunk, Document, FoldAssignment, assign_folds, chunk_document, sample_per_class
from .embedding import ExternalEmbedder, ReferenceEmbedder, distance, featurize
from .errors import CorpustuneError
from .evaluation import EvalConfig, EvidencePassage, adaptive_evaluate, modified_hausdorff
from .metrics import binarize, cohens_d_paired, dcg_at_k, mrr_at_k, ndcg_overall, stderr_and_stop
from .mining import SamplingParams, Triple, extract_triples, sample_judgment_set
from .pipeline import PipelineConfig, PipelineRunner
from .retrieval import ChunkIndex, build_index, top_k_corpus, top_k_within_doc
from .synthworld import SyntheticWorld, make_synthetic_world
from .teacher import JudgmentCache, OracleTeacher, QueryRecord, judge
from .training import TrainerConfig, train, triplet_loss, triples_accuracy

__version__ = "0.1.0"
