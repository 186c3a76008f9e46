import json

import pytest

from corpustune.cli import main as cli_main
from corpustune.corpus import load_folds, save_documents
from corpustune.embedding import ReferenceEmbedder
from corpustune.errors import PreconditionError
from corpustune.evaluation import EvalConfig
from corpustune.io_utils import file_digest, read_json, read_jsonl
from corpustune.mining import SamplingParams
from corpustune.pipeline import PipelineConfig, PipelineRunner, render_report, summarize
from corpustune.synthworld import make_synthetic_world
from corpustune.teacher import OracleTeacher
from corpustune.training import TrainerConfig


def small_world_path(tmp_path):
    world = make_synthetic_world(seed=5, n_classes=2, docs_per_class=30,
                                 chunks_per_doc=8, topics_per_class=4)
    path = tmp_path / "docs.jsonl"
    save_documents(path, world.documents)
    return path


def small_config(tmp_path, run_name="run", seed=11):
    return PipelineConfig(
        run_dir=str(tmp_path / run_name),
        documents_path=str(tmp_path / "docs.jsonl"),
        seed=seed,
        iterations=1,
        target_chunks_per_class=120,
        queries_per_class=6,
        synthetic_per_class=6,
        chunk_sample_size=10,
        exemplars_per_prompt=4,
        n_clusters=4,
        sampling=SamplingParams(k=2, corpus_k=8, omega=0.1, seed=1),
        trainer=TrainerConfig(epochs=2, batch_size=16, learning_rate=1e-2, seed=2),
        eval=EvalConfig(union_k=10, k=2, selection_divisor=2,
                        judge_tag="final-eval-judge"),
        eval_queries_per_class=4,
    )


def run_digests(run_dir, exclude=("config.json",)):
    out = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name not in exclude:
            out[str(path.relative_to(run_dir))] = file_digest(path)
    return out


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipeline")
    small_world_path(tmp_path)
    config = small_config(tmp_path)
    runner = PipelineRunner(config)
    manifest = runner.run_iteration(0)
    reports = runner.run_final_evaluation()
    return tmp_path, config, runner, manifest, reports


class TestSyntheticWorld:
    def test_same_seed_byte_identical_jsonl(self, tmp_path):
        paths = []
        for name in ("a.jsonl", "b.jsonl"):
            world = make_synthetic_world(seed=9, n_classes=2, docs_per_class=5,
                                         chunks_per_doc=4, topics_per_class=3)
            path = tmp_path / name
            save_documents(path, world.documents)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_dates_cover_the_test_window(self):
        world = make_synthetic_world(seed=1, n_classes=1, docs_per_class=30,
                                     chunks_per_doc=4, topics_per_class=3)
        months = {d.date.month for d in world.documents}
        assert 7 in months and 1 in months

    def test_planted_answer_chunk_always_scores_4(self):
        world = make_synthetic_world(seed=2, n_classes=1, docs_per_class=3,
                                     chunks_per_doc=6, topics_per_class=3)
        oracle = world.oracle()
        doc = world.documents[0]
        topic = world.topics_by_class[doc.doc_class][0]
        q = f"what does cls-{doc.doc_class} report about top-{topic}?"
        answered = [s for s in doc.text.split(". ") if f"ans-{topic}" in s]
        assert answered
        for sentence in answered:
            assert oracle.judge(q, sentence, "r") == 4

    def test_oracle_judge_is_pure(self):
        world = make_synthetic_world(seed=3, n_classes=1, docs_per_class=2,
                                     chunks_per_doc=4, topics_per_class=2)
        oracle = world.oracle()
        q = "what does cls-class00 report about top-class00-t0?"
        passage = world.documents[0].text[:400]
        assert oracle.judge(q, passage, "r") == oracle.judge(q, passage, "r")


class TestConfig:
    def test_judge_tags_must_differ(self, tmp_path):
        with pytest.raises(PreconditionError):
            PipelineConfig(run_dir=str(tmp_path / "r"), documents_path="d",
                           train_judge_tag="same",
                           eval=EvalConfig(judge_tag="same"))

    def test_unknown_keys_rejected(self, tmp_path):
        with pytest.raises(PreconditionError):
            PipelineConfig.from_dict({"run_dir": "r", "documents_path": "d",
                                      "not_a_key": 1})

    def test_json_round_trip(self, tmp_path):
        config = small_config(tmp_path)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config.to_dict()))
        loaded = PipelineConfig.from_json(path)
        assert loaded == config

    def test_http_teacher_requires_endpoint(self, tmp_path):
        with pytest.raises(PreconditionError):
            PipelineConfig(run_dir=str(tmp_path / "r"), documents_path="d",
                           teacher_kind="http")


class TestIteration:
    def test_all_stages_complete(self, completed_run):
        _, _, _, manifest, _ = completed_run
        for stage in ("sample", "queries", "judge", "mine", "train", "validate"):
            assert manifest.stage_complete(stage)
        assert manifest.model_out == "bi-enc(1)"

    def test_new_checkpoint_exists_and_loads(self, completed_run):
        _, _, runner, _, _ = completed_run
        model = ReferenceEmbedder.load(runner.model_path(1))
        assert model.tag == "bi-enc(1)"
        base = ReferenceEmbedder.load(runner.model_path(0))
        assert model.weights.tobytes() != base.weights.tobytes()

    def test_validation_accuracy_recorded(self, completed_run):
        _, _, runner, _, _ = completed_run
        report = read_json(runner.iter_dir(0) / "training_report.json")
        assert report["val_accuracy_before"] is not None
        assert report["val_accuracy_after"] is not None

    def test_queries_are_class_bound(self, completed_run):
        _, _, runner, _, _ = completed_run
        for cls in runner.classes():
            records = list(read_jsonl(runner.iter_dir(0) / "queries" / f"{cls}.jsonl"))
            assert records
            assert all(r["class"] == cls for r in records)
            origins = {r["origin"] for r in records}
            assert origins == {"inpars", "synthetic"}
            for r in records:
                if r["origin"] == "inpars":
                    assert r["source_chunk_id"]
                else:
                    assert r["source_chunk_id"] is None

    def test_fold_hygiene_no_test_docs_in_triples(self, completed_run):
        _, _, runner, _, _ = completed_run
        folds = load_folds(runner.corpus_dir / "folds.jsonl")
        test_docs = {d for d, f in folds.items() if f == "test"}
        for cls in runner.classes():
            for rec in read_jsonl(runner.iter_dir(0) / "triples" / f"{cls}.jsonl"):
                assert rec["doc_id"] not in test_docs

    def test_triples_satisfy_constraints_against_judgments(self, completed_run):
        _, _, runner, _, _ = completed_run
        scores = {}
        for path in (runner.iter_dir(0) / "judgments").glob("*.jsonl"):
            for rec in read_jsonl(path):
                scores[(rec["q_id"], rec["chunk_id"])] = rec["score"]
        doc_of = runner.doc_of_chunk()
        n = 0
        for cls in runner.classes():
            for rec in read_jsonl(runner.iter_dir(0) / "triples" / f"{cls}.jsonl"):
                n += 1
                assert rec["pos"] != rec["neg"]
                assert doc_of[rec["pos"]] == doc_of[rec["neg"]] == rec["doc_id"]
                assert scores[(rec["q_id"], rec["pos"])] == 4
                assert scores[(rec["q_id"], rec["neg"])] <= 2
        assert n > 0

    def test_validation_metrics_have_full_coverage(self, completed_run):
        _, _, runner, _, _ = completed_run
        for cls in runner.classes():
            metrics = read_json(runner.iter_dir(0) / "metrics" / f"{cls}.json")
            assert metrics["metrics"]["coverage"] == 1.0

    def test_rerun_is_noop_with_unchanged_digests(self, completed_run):
        tmp_path, config, _, _, _ = completed_run
        before = run_digests(tmp_path / "run")
        rerun = PipelineRunner(config)
        rerun.run_iteration(0)
        assert run_digests(tmp_path / "run") == before

    def test_missing_checkpoint_is_a_clear_error(self, completed_run):
        tmp_path, config, _, _, _ = completed_run
        runner = PipelineRunner(config)
        with pytest.raises(Exception, match="bi-enc"):
            runner.run_iteration(5)


class TestCrashResume:
    def test_resume_after_judging_reproduces_artifacts_without_teacher_calls(
            self, completed_run, tmp_path, monkeypatch):
        run_tmp, _, _, _, _ = completed_run
        reference = run_digests(run_tmp / "run")

        # fresh directory, same config -> run only through the judge stage,
        # then "crash" and resume with a new runner
        small_world_path(tmp_path)
        config = small_config(tmp_path)
        first = PipelineRunner(config)
        first.folds()
        first.ensure_baseline()
        manifest = first.load_manifest(0)
        for stage in ("sample", "queries", "judge"):
            getattr(first, f"_stage_{stage}")(0, manifest)

        calls = {"judge": 0}
        original = OracleTeacher.judge

        def counting_judge(self, query, passage, rubric_id):
            calls["judge"] += 1
            return original(self, query, passage, rubric_id)

        monkeypatch.setattr(OracleTeacher, "judge", counting_judge)
        resumed = PipelineRunner(config)
        resumed.run_iteration(0)
        # step-6a pairs are new; stage-3 pairs are all served from the cache
        stage3_pairs = sum(
            1 for cls in resumed.classes()
            for _ in read_jsonl(resumed.iter_dir(0) / "judgments" / f"{cls}.jsonl"))
        rejudged = sum(
            1 for cls in resumed.classes()
            for _ in read_jsonl(resumed.iter_dir(0) / "judgments" / f"{cls}.rejudge.jsonl"))
        assert calls["judge"] <= rejudged  # never re-judged the cached stage-3 pairs
        assert stage3_pairs > 0

        monkeypatch.setattr(OracleTeacher, "judge", original)
        resumed.run_final_evaluation()
        assert run_digests(tmp_path / "run") == reference

    def test_rejudging_a_complete_run_makes_no_teacher_calls(
            self, completed_run, monkeypatch):
        _, config, _, _, _ = completed_run
        calls = {"judge": 0}
        original = OracleTeacher.judge

        def counting_judge(self, query, passage, rubric_id):
            calls["judge"] += 1
            return original(self, query, passage, rubric_id)

        monkeypatch.setattr(OracleTeacher, "judge", counting_judge)
        runner = PipelineRunner(config)
        runner.run_iteration(0)
        assert calls["judge"] == 0


class TestFinalEvaluation:
    def test_reports_use_the_final_judge_tag(self, completed_run):
        _, _, _, _, reports = completed_run
        assert reports
        for row in reports:
            assert row["judge_tag"] == "final-eval-judge"

    def test_counts_equal_sampled_units(self, completed_run):
        _, _, _, _, reports = completed_run
        for row in reports:
            assert row["count"] == len(row["units"])
            mrr = row["metrics"]["mrr@2"]
            assert mrr["base"]["n"] == row["count"]
            assert mrr["exp"]["n"] == row["count"]

    def test_report_renders_text_and_json_in_agreement(self, completed_run):
        _, _, runner, _, reports = completed_run
        text, summary = render_report(reports, k=2)
        assert summary == summarize(reports, k=2)
        lines = [l for l in text.splitlines() if l and not l.startswith("-")]
        assert len(lines) == len(summary) + 1  # header + one row per record
        for rec in summary:
            row_line = [l for l in lines[1:] if rec["class"] in l]
            assert row_line
            if rec["mrr_base"] is not None:
                assert f"{rec['mrr_base']:.4f}" in row_line[0]

    def test_report_includes_iteration_manifests(self, completed_run):
        _, _, runner, _, reports = completed_run
        text, _ = render_report(reports, k=2, manifests=runner.load_manifests())
        assert "iteration 0: bi-enc(0) -> bi-enc(1)" in text

    def test_empty_report_set_renders_header_only(self):
        text, summary = render_report([], k=5)
        assert summary == []
        assert "class" in text

    def test_test_queries_come_from_test_fold_docs(self, completed_run):
        _, _, runner, _, _ = completed_run
        folds = load_folds(runner.corpus_dir / "folds.jsonl")
        for cls in runner.classes():
            path = runner.final_eval_dir() / "queries" / f"{cls}.jsonl"
            for rec in read_jsonl(path):
                doc_id = rec["source_chunk_id"].rsplit(":", 1)[0]
                assert folds[doc_id] == "test"


class TestCli:
    def test_synth_world_and_stagewise_run(self, tmp_path, capsys):
        docs = tmp_path / "docs.jsonl"
        rc = cli_main(["synth-world", "--out", str(docs), "--world-seed", "3",
                       "--classes", "1", "--docs-per-class", "12",
                       "--chunks-per-doc", "6", "--topics", "3"])
        assert rc == 0

        config = PipelineConfig(
            run_dir=str(tmp_path / "cli-run"), documents_path=str(docs),
            seed=4, iterations=1, target_chunks_per_class=36,
            queries_per_class=4, synthetic_per_class=4, chunk_sample_size=6,
            exemplars_per_prompt=3, n_clusters=3,
            sampling=SamplingParams(k=2, corpus_k=6, omega=0.1, seed=1),
            trainer=TrainerConfig(epochs=1, batch_size=8, seed=2),
            eval=EvalConfig(union_k=6, k=2, selection_divisor=2,
                            judge_tag="final-eval-judge"),
            eval_queries_per_class=3)
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config.to_dict()))

        base = ["--config", str(config_path)]
        for command in ("ingest", "chunk", "folds"):
            assert cli_main(base + [command]) == 0
        for stage in ("sample", "queries", "judge", "mine", "train", "validate"):
            assert cli_main(base + ["--iteration", "0", stage]) == 0
        assert cli_main(base + ["final-eval"]) == 0
        json_out = tmp_path / "summary.json"
        assert cli_main(base + ["report", "--json-out", str(json_out)]) == 0
        assert json.loads(json_out.read_text())
        out = capsys.readouterr().out
        assert "mrr_base" in out

    def test_missing_config_is_precondition_exit_2(self):
        assert cli_main(["ingest"]) == 2

    def test_stage_without_prerequisites_exits_2(self, tmp_path):
        docs = tmp_path / "docs.jsonl"
        cli_main(["synth-world", "--out", str(docs), "--classes", "1",
                  "--docs-per-class", "6", "--chunks-per-doc", "4",
                  "--topics", "2"])
        config = PipelineConfig(run_dir=str(tmp_path / "r"),
                                documents_path=str(docs))
        config_path = tmp_path / "c.json"
        config_path.write_text(json.dumps(config.to_dict()))
        rc = cli_main(["--config", str(config_path), "--iteration", "0", "mine"])
        assert rc == 2

    def _staged_config(self, tmp_path, **overrides):
        docs = tmp_path / "docs.jsonl"
        cli_main(["synth-world", "--out", str(docs), "--classes", "1",
                  "--docs-per-class", "10", "--chunks-per-doc", "4",
                  "--topics", "2"])
        fields = dict(
            run_dir=str(tmp_path / "r"), documents_path=str(docs), seed=1,
            target_chunks_per_class=20, queries_per_class=3,
            synthetic_per_class=3, chunk_sample_size=4, exemplars_per_prompt=2,
            n_clusters=2,
            sampling=SamplingParams(k=1, corpus_k=4, seed=1),
            trainer=TrainerConfig(epochs=1, batch_size=4, seed=2),
            eval=EvalConfig(union_k=4, k=1, judge_tag="final-eval-judge"))
        fields.update(overrides)
        config_path = tmp_path / "c.json"
        config_path.write_text(json.dumps(PipelineConfig(**fields).to_dict()))
        return config_path

    def test_dead_teacher_endpoint_exits_3(self, tmp_path):
        config_path = self._staged_config(
            tmp_path, teacher_kind="http",
            teacher_endpoint="http://127.0.0.1:9")  # discard port: refused
        base = ["--config", str(config_path), "--iteration", "0"]
        assert cli_main(base + ["sample"]) == 0
        assert cli_main(base + ["queries"]) == 3

    def test_exhausted_judge_budget_exits_4(self, tmp_path):
        config_path = self._staged_config(tmp_path, judge_budget_per_stage=1)
        base = ["--config", str(config_path), "--iteration", "0"]
        for stage in ("sample", "queries"):
            assert cli_main(base + [stage]) == 0
        assert cli_main(base + ["judge"]) == 4
