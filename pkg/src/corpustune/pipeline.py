"""Pipeline orchestration: iterations, final evaluation, persistence, resume.

A run lives under one directory:

    <run_dir>/
      config.json                  frozen copy of the effective configuration
      corpus/{documents,chunks,folds}.jsonl
      models/bi-enc-<i>.ckpt       one checkpoint per model version
      cache/<judge_tag>.jsonl      idempotent judgment caches
      iter<iii>/                   per-iteration artifacts + manifest.json
      final_eval/                  out-of-sample queries and paired reports

Every stage writes its artifacts, then records their content digests in the
iteration manifest; a stage whose digests are already recorded is skipped, so
re-running a finished iteration is a no-op and an interrupted run resumes
where it stopped without repeating teacher calls (the judgment cache absorbs
those).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from . import corpus as corpus_ops
from . import mining as mining_ops
from . import teacher as teacher_ops
from .corpus import TEST, TRAIN, VAL, Chunk, Document
from .embedding import ReferenceEmbedder
from .errors import CorpustuneError, PreconditionError
from .evaluation import (
    EvalConfig,
    adaptive_evaluate,
    score_and_select_docs,
    union_test_retrieval,
    validation_metrics,
)
from .io_utils import (
    file_digest,
    read_json,
    read_jsonl,
    stable_seed,
    write_json,
    write_jsonl,
)
from .mining import SamplingParams, Triple
from .retrieval import ChunkIndex, build_index, docs_of, top_k_corpus, top_k_within_doc
from .teacher import (
    DEFAULT_RUBRIC,
    CallBudget,
    HttpTeacherClient,
    JudgmentCache,
    OracleTeacher,
    QueryRecord,
)
from .training import TrainerConfig, train

logger = logging.getLogger(__name__)

STAGES = ("sample", "queries", "judge", "mine", "train", "validate")


@dataclass(frozen=True)
class PipelineConfig:
    run_dir: str
    documents_path: str
    seed: int = 0
    iterations: int = 1

    # corpus
    chunk_min_chars: int = 500
    chunk_max_chars: int = 1000
    test_start: str = "2024-07-01"
    val_fraction: float = 0.30
    target_chunks_per_class: int = 1_000_000

    # query generation
    queries_per_class: int = 200  # InPars queries kept per class (M)
    synthetic_per_class: int = 200  # synthetic queries per class (M)
    chunk_sample_size: int = 500  # InPars candidates per document
    exemplars_per_prompt: int = 5
    synthetic_per_call: int = 5
    n_clusters: int = 10
    inpars_template: str = "vanilla"
    fewshot_template: str = "fewshot"

    # teacher plumbing
    teacher_kind: str = "oracle"  # oracle | http
    teacher_endpoint: str | None = None
    final_judge_kind: str = "oracle"
    final_judge_endpoint: str | None = None
    train_judge_tag: str = "train-judge"
    judge_budget_per_stage: int = 50_000
    teacher_max_in_flight: int = 8

    # model + training
    hash_dim: int = 2 ** 15
    out_dim: int = 64
    stability_ratio: float = 3.0
    sampling: SamplingParams = field(default_factory=SamplingParams)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    eval_queries_per_class: int | None = None

    def __post_init__(self):
        if self.train_judge_tag == self.eval.judge_tag:
            raise PreconditionError(
                "the final-evaluation judge must differ from the training judge")
        if self.teacher_kind not in ("oracle", "http"):
            raise PreconditionError(f"unknown teacher kind {self.teacher_kind!r}")
        if self.teacher_kind == "http" and not self.teacher_endpoint:
            raise PreconditionError("http teacher requires an endpoint")
        if self.final_judge_kind == "http" and not self.final_judge_endpoint:
            raise PreconditionError("http final judge requires an endpoint")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        raw = dict(raw)
        for key, sub in (("sampling", SamplingParams), ("trainer", TrainerConfig),
                         ("eval", EvalConfig)):
            if key in raw and isinstance(raw[key], dict):
                raw[key] = sub(**raw[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise PreconditionError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(read_json(path))


@dataclass
class IterationManifest:
    iteration: int
    model_in: str
    model_out: str | None = None
    stages: dict[str, dict] = field(default_factory=dict)

    def stage_complete(self, name: str) -> bool:
        return self.stages.get(name, {}).get("complete", False)

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "model_in": self.model_in,
                "model_out": self.model_out, "stages": self.stages}

    @classmethod
    def from_dict(cls, raw: dict) -> "IterationManifest":
        return cls(iteration=raw["iteration"], model_in=raw["model_in"],
                   model_out=raw.get("model_out"), stages=raw.get("stages", {}))


class PipelineRunner:
    """Owns one run directory and executes stages against it."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.run_dir = Path(config.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        config_path = self.run_dir / "config.json"
        write_json(config_path, config.to_dict())

        self.class_filter: str | None = None
        self._documents: list[Document] | None = None
        self._chunks: list[Chunk] | None = None
        self._folds: dict[str, str] | None = None
        self._caches: dict[str, JudgmentCache] = {}
        self._feature_cache: dict = {}

    # -- corpus -------------------------------------------------------------

    @property
    def corpus_dir(self) -> Path:
        return self.run_dir / "corpus"

    def ingest(self) -> Path:
        """Validate the source corpus and copy it into the run, canonically."""
        out = self.corpus_dir / "documents.jsonl"
        if not out.exists():
            docs = corpus_ops.load_documents(self.config.documents_path)
            for doc in docs:
                if not doc.text:
                    raise PreconditionError(f"document {doc.doc_id!r} has empty text")
            self.corpus_dir.mkdir(parents=True, exist_ok=True)
            corpus_ops.save_documents(out, docs)
        return out

    def chunk(self) -> Path:
        out = self.corpus_dir / "chunks.jsonl"
        if not out.exists():
            docs = corpus_ops.load_documents(self.ingest())
            chunks = corpus_ops.chunk_corpus(
                docs, min_len=self.config.chunk_min_chars,
                max_len=self.config.chunk_max_chars)
            corpus_ops.save_chunks(out, chunks)
        return out

    def folds(self) -> Path:
        out = self.corpus_dir / "folds.jsonl"
        if not out.exists():
            docs = corpus_ops.load_documents(self.ingest())
            self.chunk()
            counts: dict[str, int] = {}
            for c in self.chunks():
                counts[c.doc_id] = counts.get(c.doc_id, 0) + 1
            assignment = corpus_ops.assign_folds(
                docs, test_start=date.fromisoformat(self.config.test_start),
                val_fraction_target=self.config.val_fraction,
                chunk_counts=counts)
            for warning in assignment.warnings:
                logger.warning("%s", warning)
            corpus_ops.save_folds(out, assignment)
        return out

    def documents(self) -> list[Document]:
        if self._documents is None:
            self._documents = corpus_ops.load_documents(self.ingest())
        return self._documents

    def chunks(self) -> list[Chunk]:
        if self._chunks is None:
            self._chunks = corpus_ops.load_chunks(self.chunk())
        return self._chunks

    def fold_of_doc(self) -> dict[str, str]:
        if self._folds is None:
            self._folds = corpus_ops.load_folds(self.folds())
        return self._folds

    def classes(self) -> list[str]:
        all_classes = sorted({d.doc_class for d in self.documents()})
        if self.class_filter is None:
            return all_classes
        if self.class_filter not in all_classes:
            raise PreconditionError(f"unknown class {self.class_filter!r}")
        return [self.class_filter]

    def chunks_by_doc(self) -> dict[str, list[Chunk]]:
        out: dict[str, list[Chunk]] = {}
        for c in self.chunks():
            out.setdefault(c.doc_id, []).append(c)
        return out

    def chunks_by_id(self) -> dict[str, Chunk]:
        return {c.chunk_id: c for c in self.chunks()}

    def doc_of_chunk(self) -> dict[str, str]:
        return {c.chunk_id: c.doc_id for c in self.chunks()}

    def class_of_doc(self) -> dict[str, str]:
        return {d.doc_id: d.doc_class for d in self.documents()}

    # -- teachers and caches --------------------------------------------------

    def train_teacher(self):
        if self.config.teacher_kind == "oracle":
            return OracleTeacher(salt=self.config.seed)
        return HttpTeacherClient(self.config.teacher_endpoint)

    def final_judge(self):
        if self.config.final_judge_kind == "oracle":
            return OracleTeacher(salt=self.config.seed)
        return HttpTeacherClient(self.config.final_judge_endpoint)

    def cache_for(self, judge_tag: str) -> JudgmentCache:
        if judge_tag not in self._caches:
            self._caches[judge_tag] = JudgmentCache(
                self.run_dir / "cache" / f"{judge_tag}.jsonl")
        return self._caches[judge_tag]

    # -- models ---------------------------------------------------------------

    def model_path(self, iteration: int) -> Path:
        return self.run_dir / "models" / f"bi-enc-{iteration}.ckpt"

    def ensure_baseline(self) -> ReferenceEmbedder:
        path = self.model_path(0)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            model = ReferenceEmbedder.initialize(
                tag="bi-enc(0)", hash_dim=self.config.hash_dim,
                out_dim=self.config.out_dim, seed=self.config.seed)
            model.save(path)
        return self.load_model(0)

    def load_model(self, iteration: int) -> ReferenceEmbedder:
        path = self.model_path(iteration)
        if not path.exists():
            raise CorpustuneError(f"missing model checkpoint for iteration "
                                  f"{iteration}: {path}")
        model = ReferenceEmbedder.load(path)
        model._feature_cache = self._feature_cache  # shared hashing lineage
        return model

    # -- manifest helpers -------------------------------------------------------

    def iter_dir(self, iteration: int) -> Path:
        return self.run_dir / f"iter{iteration:03d}"

    def load_manifest(self, iteration: int) -> IterationManifest:
        path = self.iter_dir(iteration) / "manifest.json"
        if path.exists():
            return IterationManifest.from_dict(read_json(path))
        return IterationManifest(iteration=iteration,
                                 model_in=f"bi-enc({iteration})")

    def _save_manifest(self, manifest: IterationManifest) -> None:
        path = self.iter_dir(manifest.iteration) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_json(path, manifest.to_dict())

    def _complete_stage(self, manifest: IterationManifest, stage: str,
                        artifacts: list[Path]) -> None:
        if self.class_filter is not None:
            return  # partial (one-class) runs never mark a stage complete
        base = self.run_dir
        digests = {str(p.relative_to(base)): file_digest(p)
                   for p in sorted(artifacts)}
        manifest.stages[stage] = {"complete": True, "artifacts": digests}
        self._save_manifest(manifest)

    # -- iteration stages -------------------------------------------------------

    def run_iteration(self, iteration: int) -> IterationManifest:
        """Execute all stages of one iteration, skipping completed ones."""
        self.folds()
        if iteration == 0:
            self.ensure_baseline()
        elif not self.model_path(iteration).exists():
            raise CorpustuneError(
                f"iteration {iteration} needs checkpoint bi-enc({iteration}); "
                f"run iteration {iteration - 1} first")
        manifest = self.load_manifest(iteration)
        for stage in STAGES:
            if manifest.stage_complete(stage):
                continue
            getattr(self, f"_stage_{stage}")(iteration, manifest)
        return manifest

    def run_stage(self, stage: str, iteration: int) -> None:
        """Run one named stage of an iteration (prerequisite artifacts must
        already exist); completed stages are skipped."""
        if stage not in STAGES:
            raise PreconditionError(f"unknown stage {stage!r}")
        self.folds()
        if iteration == 0:
            self.ensure_baseline()
        manifest = self.load_manifest(iteration)
        if manifest.stage_complete(stage):
            logger.info("stage %s already complete for iteration %d", stage,
                        iteration)
            return
        getattr(self, f"_stage_{stage}")(iteration, manifest)

    def _stage_sample(self, iteration: int, manifest: IterationManifest) -> None:
        folds = self.fold_of_doc()
        tv_docs = [d for d in self.documents() if folds[d.doc_id] != TEST]
        counts: dict[str, int] = {}
        for c in self.chunks():
            counts[c.doc_id] = counts.get(c.doc_id, 0) + 1
        selected = corpus_ops.sample_per_class(
            tv_docs, self.config.target_chunks_per_class,
            seed=stable_seed(self.config.seed, "sample", iteration),
            chunk_counts=counts)
        out = self.iter_dir(iteration) / "sample.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        write_json(out, {"doc_ids": selected})
        self._complete_stage(manifest, "sample", [out])

    def _sampled_doc_ids(self, iteration: int) -> list[str]:
        return read_json(self._require(
            self.iter_dir(iteration) / "sample.json", "sample"))["doc_ids"]

    def _require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise CorpustuneError(
                f"missing artifact {path}; run the {stage!r} stage first")
        return path

    def _stage_queries(self, iteration: int, manifest: IterationManifest) -> None:
        cfg = self.config
        teacher = self.train_teacher()
        baseline = self.ensure_baseline()  # exemplar clustering model
        by_doc = self.chunks_by_doc()
        class_of = self.class_of_doc()
        sampled = self._sampled_doc_ids(iteration)

        out_dir = self.iter_dir(iteration) / "queries"
        out_dir.mkdir(parents=True, exist_ok=True)
        artifacts = []
        for cls in self.classes():
            docs = [d for d in sampled if class_of[d] == cls]
            candidates: list[QueryRecord] = []
            for doc_id in docs:
                candidates.extend(teacher_ops.generate_inpars_queries(
                    teacher, by_doc[doc_id], cls, iteration=iteration,
                    seed=stable_seed(cfg.seed, "inpars", iteration),
                    chunk_sample_size=cfg.chunk_sample_size,
                    template_id=cfg.inpars_template))
            selected = teacher_ops.select_top_queries(candidates,
                                                      k=cfg.queries_per_class)
            synthetic = teacher_ops.generate_synthetic_queries(
                teacher, selected, baseline, m=cfg.synthetic_per_class,
                exemplars_per_prompt=cfg.exemplars_per_prompt,
                per_call=cfg.synthetic_per_call, n_clusters=cfg.n_clusters,
                seed=stable_seed(cfg.seed, "synthetic", iteration, cls),
                iteration=iteration, template_id=cfg.fewshot_template)
            path = out_dir / f"{cls}.jsonl"
            teacher_ops.save_queries(path, selected + synthetic)
            artifacts.append(path)
        self._complete_stage(manifest, "queries", artifacts)

    def _iteration_queries(self, iteration: int, cls: str) -> list[QueryRecord]:
        return teacher_ops.load_queries(self._require(
            self.iter_dir(iteration) / "queries" / f"{cls}.jsonl", "queries"))

    def _tv_index(self, iteration: int, model: ReferenceEmbedder) -> ChunkIndex:
        """Index over the iteration's sampled train+val chunks under ``model``."""
        sampled = set(self._sampled_doc_ids(iteration))
        chunks = [c for c in self.chunks() if c.doc_id in sampled]
        return build_index(model, chunks, fold_of_doc=self.fold_of_doc())

    def _stage_judge(self, iteration: int, manifest: IterationManifest) -> None:
        cfg = self.config
        teacher = self.train_teacher()
        cache = self.cache_for(cfg.train_judge_tag)
        budget = CallBudget(cfg.judge_budget_per_stage)
        model = self.load_model(iteration)
        index = self._tv_index(iteration, model)
        folds = self.fold_of_doc()
        chunk_by_id = self.chunks_by_id()

        judgments_dir = self.iter_dir(iteration) / "judgments"
        docsets_dir = self.iter_dir(iteration) / "docsets"
        judgments_dir.mkdir(parents=True, exist_ok=True)
        docsets_dir.mkdir(parents=True, exist_ok=True)
        artifacts = []
        for cls in self.classes():
            queries = self._iteration_queries(iteration, cls)
            pairs = []
            docsets: dict[str, dict[str, list[str]]] = {}
            for q in sorted(queries, key=lambda q: q.q_id):
                hits = top_k_corpus(index, q, cfg.sampling.corpus_k)
                d_q = sorted(docs_of(hits, index.doc_of))
                docsets[q.q_id] = {
                    TRAIN: [d for d in d_q if folds[d] == TRAIN],
                    VAL: [d for d in d_q if folds[d] == VAL],
                }
                for doc_id in d_q:
                    for chunk_id in mining_ops.sample_judgment_set(
                            index, q, doc_id, cfg.sampling):
                        pairs.append((q, chunk_by_id[chunk_id]))
            judgments = teacher_ops.judge_many(
                teacher, cache, pairs, DEFAULT_RUBRIC, cfg.train_judge_tag,
                budget=budget, max_in_flight=cfg.teacher_max_in_flight)
            jpath = judgments_dir / f"{cls}.jsonl"
            _save_judgment_records(jpath, judgments)
            dpath = docsets_dir / f"{cls}.json"
            write_json(dpath, docsets)
            artifacts.extend([jpath, dpath])
        cache.flush_sorted()
        self._complete_stage(manifest, "judge", artifacts)

    def _stage_mine(self, iteration: int, manifest: IterationManifest) -> None:
        doc_of = self.doc_of_chunk()
        folds = self.fold_of_doc()
        out_dir = self.iter_dir(iteration) / "triples"
        out_dir.mkdir(parents=True, exist_ok=True)
        artifacts = []
        for cls in self.classes():
            judgments = _load_judgment_records(self._require(
                self.iter_dir(iteration) / "judgments" / f"{cls}.jsonl", "judge"))
            by_fold = mining_ops.extract_triples(judgments, doc_of, folds,
                                                 iteration=iteration)
            path = out_dir / f"{cls}.jsonl"
            mining_ops.save_triples(path, by_fold)
            artifacts.append(path)
        self._complete_stage(manifest, "mine", artifacts)

    def _all_triples_through(self, iteration: int) -> dict[str, list[Triple]]:
        """Triples concatenated from iterations 0..iteration, across classes."""
        out: dict[str, list[Triple]] = {TRAIN: [], VAL: []}
        for it in range(iteration + 1):
            for cls in self.classes():
                path = self.iter_dir(it) / "triples" / f"{cls}.jsonl"
                if not path.exists():
                    raise CorpustuneError(f"missing triples artifact {path}")
                for fold, triples in mining_ops.load_triples(path).items():
                    out.setdefault(fold, []).extend(triples)
        return out

    def _query_texts_through(self, iteration: int) -> dict[str, str]:
        texts: dict[str, str] = {}
        for it in range(iteration + 1):
            for cls in self.classes():
                for q in self._iteration_queries(it, cls):
                    texts[q.q_id] = q.text
        return texts

    def _stage_train(self, iteration: int, manifest: IterationManifest) -> None:
        cfg = self.config
        model = self.load_model(iteration)
        triples = self._all_triples_through(iteration)
        query_texts = self._query_texts_through(iteration)
        chunk_texts = {c.chunk_id: c.text for c in self.chunks()}

        train_set = mining_ops.add_stability_triples(
            model, triples.get(TRAIN, []), query_texts, chunk_texts,
            ratio=cfg.stability_ratio, margin=cfg.trainer.margin,
            seed=stable_seed(cfg.seed, "stability", iteration))
        trainer_cfg = dataclasses.replace(
            cfg.trainer, seed=stable_seed(cfg.trainer.seed, "train", iteration))
        new_model, report = train(
            model, train_set, trainer_cfg, query_texts, chunk_texts,
            val_triples=triples.get(VAL, []), out_tag=f"bi-enc({iteration + 1})")

        ckpt = self.model_path(iteration + 1)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        new_model.save(ckpt)
        report_path = self.iter_dir(iteration) / "training_report.json"
        write_json(report_path, report.to_dict())
        manifest.model_out = new_model.tag
        self._complete_stage(manifest, "train", [ckpt, report_path])

    def _stage_validate(self, iteration: int, manifest: IterationManifest) -> None:
        cfg = self.config
        teacher = self.train_teacher()
        cache = self.cache_for(cfg.train_judge_tag)
        budget = CallBudget(cfg.judge_budget_per_stage)
        model_base = self.load_model(iteration)
        model_exp = self.load_model(iteration + 1)
        index_base = self._tv_index(iteration, model_base)
        index_exp = self._tv_index(iteration, model_exp)
        chunk_by_id = self.chunks_by_id()
        k = cfg.sampling.k

        metrics_dir = self.iter_dir(iteration) / "metrics"
        metrics_dir.mkdir(parents=True, exist_ok=True)
        artifacts = []
        for cls in self.classes():
            queries = self._iteration_queries(iteration, cls)
            docsets = read_json(self._require(
                self.iter_dir(iteration) / "docsets" / f"{cls}.json", "judge"))
            val_docs = {q_id: sets[VAL] for q_id, sets in docsets.items()}

            # re-judge the experimental model's top-k on validation documents
            pairs = []
            for q in sorted(queries, key=lambda q: q.q_id):
                for doc_id in val_docs.get(q.q_id, []):
                    for r in top_k_within_doc(index_exp, q, doc_id, k):
                        pairs.append((q, chunk_by_id[r.chunk_id]))
            judgments = teacher_ops.judge_many(
                teacher, cache, pairs, DEFAULT_RUBRIC, cfg.train_judge_tag,
                budget=budget, max_in_flight=cfg.teacher_max_in_flight)
            jpath = self.iter_dir(iteration) / "judgments" / f"{cls}.rejudge.jsonl"
            _save_judgment_records(jpath, judgments)

            def score_of(q_id, chunk_id):
                return cache.get(cfg.train_judge_tag, q_id, chunk_id)

            report = validation_metrics(queries, val_docs, index_base, index_exp,
                                        score_of, k=k, judge_tag=cfg.train_judge_tag)
            mpath = metrics_dir / f"{cls}.json"
            write_json(mpath, report.to_dict())
            artifacts.extend([jpath, mpath])
        cache.flush_sorted()
        self._complete_stage(manifest, "validate", artifacts)

    # -- final evaluation --------------------------------------------------------

    def final_eval_dir(self) -> Path:
        return self.run_dir / "final_eval"

    def generate_test_queries(self) -> dict[str, list[QueryRecord]]:
        """Out-of-sample InPars queries over the held-out test documents."""
        cfg = self.config
        teacher = self.train_teacher()
        folds = self.fold_of_doc()
        class_of = self.class_of_doc()
        by_doc = self.chunks_by_doc()
        out_dir = self.final_eval_dir() / "queries"
        out_dir.mkdir(parents=True, exist_ok=True)
        n_queries = cfg.eval_queries_per_class or cfg.queries_per_class

        out: dict[str, list[QueryRecord]] = {}
        for cls in self.classes():
            path = out_dir / f"{cls}.jsonl"
            if path.exists():
                out[cls] = teacher_ops.load_queries(path)
                continue
            test_docs = sorted(d for d, fold in folds.items()
                               if fold == TEST and class_of[d] == cls)
            candidates: list[QueryRecord] = []
            for doc_id in test_docs:
                candidates.extend(teacher_ops.generate_inpars_queries(
                    teacher, by_doc[doc_id], cls, iteration=0,
                    seed=stable_seed(cfg.seed, "test-queries"),
                    chunk_sample_size=cfg.chunk_sample_size,
                    template_id=cfg.inpars_template))
            selected = teacher_ops.select_top_queries(candidates, k=n_queries)
            teacher_ops.save_queries(path, selected)
            out[cls] = selected
        return out

    def run_final_evaluation(self) -> list[dict]:
        """Union retrieval over all model versions, document scoring, and
        adaptive judged evaluation for each iteration transition."""
        cfg = self.config
        n_iters = cfg.iterations
        for i in range(n_iters + 1):
            if not self.model_path(i).exists():
                raise CorpustuneError(
                    f"final evaluation needs checkpoint bi-enc({i}); "
                    f"iteration {max(0, i - 1)} has not produced it")
        folds = self.fold_of_doc()
        test_chunks = [c for c in self.chunks() if folds[c.doc_id] == TEST]
        if not test_chunks:
            raise PreconditionError("test fold is empty")

        models = [self.load_model(i) for i in range(n_iters + 1)]
        indexes = [build_index(m, test_chunks, fold_of_doc=folds) for m in models]
        chunk_by_id = {c.chunk_id: c for c in test_chunks}
        queries_by_class = self.generate_test_queries()
        judge = self.final_judge()
        cache = self.cache_for(cfg.eval.judge_tag)

        reports_dir = self.final_eval_dir() / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for i in range(n_iters):
            index_base, index_exp = indexes[i], indexes[i + 1]
            budget = CallBudget(cfg.judge_budget_per_stage)
            for cls in self.classes():
                path = reports_dir / f"iter{i}_{cls}.json"
                if path.exists():
                    rows.append(read_json(path))
                    continue
                queries = queries_by_class[cls]
                selected: dict[str, list[str]] = {}
                for q in sorted(queries, key=lambda q: q.q_id):
                    _, doc_ids = union_test_retrieval(indexes, q, cfg.eval.union_k)
                    kept, _scores = score_and_select_docs(
                        q, doc_ids, index_base, index_exp, cfg.eval)
                    selected[q.q_id] = kept
                report = adaptive_evaluate(
                    queries, selected, index_base, index_exp, judge, cache,
                    DEFAULT_RUBRIC, chunk_by_id, cfg.eval,
                    seed=stable_seed(cfg.seed, "adaptive", i, cls),
                    budget=budget, max_in_flight=cfg.teacher_max_in_flight)
                row = {"class": cls, "iteration": i, **report.to_dict()}
                write_json(path, row)
                rows.append(row)
            cache.flush_sorted()
        return rows

    def load_final_reports(self) -> list[dict]:
        reports_dir = self.final_eval_dir() / "reports"
        if not reports_dir.exists():
            return []
        return [read_json(p) for p in sorted(reports_dir.glob("iter*_*.json"))]

    def load_manifests(self) -> list[IterationManifest]:
        manifests = []
        for path in sorted(self.run_dir.glob("iter*/manifest.json")):
            manifests.append(IterationManifest.from_dict(read_json(path)))
        return manifests


def _save_judgment_records(path: Path, judgments) -> None:
    records = sorted(
        ({"judge_tag": j.judge_tag, "q_id": j.q_id, "chunk_id": j.chunk_id,
          "score": j.score} for j in judgments),
        key=lambda r: (r["judge_tag"], r["q_id"], r["chunk_id"]))
    write_jsonl(path, records)


def _load_judgment_records(path: Path):
    from .teacher import Judgment
    return [Judgment(q_id=r["q_id"], chunk_id=r["chunk_id"], score=r["score"],
                     judge_tag=r["judge_tag"]) for r in read_jsonl(path)]


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

_COLUMNS = ("class", "iter", "count", "mrr_base", "mrr_exp", "mrr_d",
            "dcg_base", "dcg_exp", "dcg_d", "converged")


def summarize(rows: list[dict], k: int) -> list[dict]:
    """Flatten final-evaluation rows into one record per (class, iteration)."""
    out = []
    for row in rows:
        mrr = row["metrics"].get(f"mrr@{k}", {})
        dcg = row["metrics"].get(f"dcg@{k}", {})
        out.append({
            "class": row["class"],
            "iter": row["iteration"],
            "count": row["count"],
            "mrr_base": _mean(mrr), "mrr_exp": _mean(mrr, "exp"),
            "mrr_d": mrr.get("cohens_d"),
            "dcg_base": _mean(dcg), "dcg_exp": _mean(dcg, "exp"),
            "dcg_d": dcg.get("cohens_d"),
            "converged": row["converged"],
        })
    out.sort(key=lambda r: (r["iter"], r["class"]))
    return out


def _mean(metric: dict, side: str = "base"):
    return metric.get(side, {}).get("mean")


def render_report(rows: list[dict], k: int,
                  manifests: list[IterationManifest] = ()) -> tuple[str, list[dict]]:
    """Human-readable table plus the JSON rows it was rendered from."""
    summary = summarize(rows, k)
    lines = []
    for manifest in manifests:
        done = [s for s in STAGES if manifest.stage_complete(s)]
        lines.append(f"iteration {manifest.iteration}: {manifest.model_in} -> "
                     f"{manifest.model_out or '(incomplete)'}; stages "
                     f"{','.join(done) or 'none'}")
    header = "  ".join(f"{c:>10}" for c in _COLUMNS)
    lines += [header, "-" * len(header)]
    for rec in summary:
        cells = []
        for col in _COLUMNS:
            value = rec[col]
            if isinstance(value, float):
                cells.append(f"{value:>10.4f}")
            else:
                cells.append(f"{str(value):>10}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n", summary
