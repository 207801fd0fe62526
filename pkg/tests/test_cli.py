import json
import subprocess
import sys

import numpy as np
import pytest

from protodetect import (
    GroundTruthAnnotation,
    GroundTruthSet,
    PrototypeStore,
    Prototype,
    read_bop_results,
    read_ground_truth,
    save_store,
    validate,
)
from synth import make_benchmark, write_benchmark_files


def run_cli(*argv, check=None):
    proc = subprocess.run(
        [sys.executable, "-m", "protodetect", *argv],
        capture_output=True,
        text=True,
    )
    if check is not None:
        assert proc.returncode == check, f"exit {proc.returncode}\n{proc.stdout}\n{proc.stderr}"
    return proc


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("bench")
    bench = make_benchmark(n_scenes=5, seed=777)
    paths = write_benchmark_files(bench, directory)
    paths["dir"] = directory
    paths["bench"] = bench
    return paths


class TestBuildPrototypes:
    def test_builds_store_and_reports_classes(self, bench_dir, tmp_path):
        out = tmp_path / "store.dpmp"
        proc = run_cli("build-prototypes", "--supports", bench_dir["supports"],
                       "--out", str(out), check=0)
        from protodetect import load_store
        store = load_store(out)
        assert store.class_ids == (1, 2, 3, 4, 5)
        for class_id in store.class_ids:
            assert f"class {class_id}: k=10 norm=" in proc.stdout
        assert store[1].k_support == 10

    def test_rerun_is_byte_identical(self, bench_dir, tmp_path):
        first, second = tmp_path / "a.dpmp", tmp_path / "b.dpmp"
        run_cli("build-prototypes", "--supports", bench_dir["supports"], "--out", str(first), check=0)
        run_cli("build-prototypes", "--supports", bench_dir["supports"], "--out", str(second), check=0)
        assert first.read_bytes() == second.read_bytes()

    def test_matches_offline_store(self, bench_dir, tmp_path):
        out = tmp_path / "store.dpmp"
        run_cli("build-prototypes", "--supports", bench_dir["supports"], "--out", str(out), check=0)
        assert out.read_bytes() == open(bench_dir["store"], "rb").read()

    def test_proposal_keyed_archive_rejected(self, bench_dir, tmp_path):
        proc = run_cli("build-prototypes", "--supports", bench_dir["embeddings"],
                       "--out", str(tmp_path / "x.dpmp"))
        assert proc.returncode == 4
        assert "proposal-keyed" in proc.stderr

    def test_duplicate_archive_key_fails(self, bench_dir, tmp_path):
        # corrupt a copy of the sidecar so two rows share one key
        archive = tmp_path / "dup.dpme"
        archive.write_bytes(open(bench_dir["supports"], "rb").read())
        meta = json.loads(open(bench_dir["supports"] + ".json").read())
        meta["keys"][1] = meta["keys"][0]
        (tmp_path / "dup.dpme.json").write_text(json.dumps(meta))
        proc = run_cli("build-prototypes", "--supports", str(archive),
                       "--out", str(tmp_path / "x.dpmp"))
        assert proc.returncode != 0
        assert "duplicate" in proc.stderr.lower()


class TestDetect:
    def detect_args(self, bench_dir, out, *extra):
        return ["detect",
                "--proposals", bench_dir["proposals"],
                "--embeddings", bench_dir["embeddings"],
                "--store", bench_dir["store"],
                "--out", str(out), *extra]

    def test_produces_valid_sorted_results(self, bench_dir, tmp_path):
        out = tmp_path / "results.json"
        proc = run_cli(*self.detect_args(bench_dir, out), check=0)
        assert validate(out, format_hint="results") == []
        records = read_bop_results(out)
        assert len(records) > 0
        assert "total:" in proc.stdout
        assert all(r.time_s == -1.0 for r in records)

    def test_rerun_is_byte_identical(self, bench_dir, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        run_cli(*self.detect_args(bench_dir, a), check=0)
        run_cli(*self.detect_args(bench_dir, b), check=0)
        assert a.read_bytes() == b.read_bytes()

    def test_jobs_do_not_change_output(self, bench_dir, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        run_cli(*self.detect_args(bench_dir, a, "--jobs", "1"), check=0)
        run_cli(*self.detect_args(bench_dir, b, "--jobs", "4"), check=0)
        assert a.read_bytes() == b.read_bytes()

    def test_measure_time_opts_into_timing(self, bench_dir, tmp_path):
        out = tmp_path / "timed.json"
        run_cli(*self.detect_args(bench_dir, out, "--measure-time"), check=0)
        records = read_bop_results(out)
        assert all(r.time_s >= 0.0 for r in records)

    def test_raising_tau_cannot_add_detections(self, bench_dir, tmp_path):
        default, strict = tmp_path / "d.json", tmp_path / "s.json"
        run_cli(*self.detect_args(bench_dir, default), check=0)
        run_cli(*self.detect_args(bench_dir, strict, "--tau", "0.99"), check=0)
        assert len(read_bop_results(strict)) <= len(read_bop_results(default))

    def test_config_file_equals_flags(self, bench_dir, tmp_path):
        config = tmp_path / "run.toml"
        config.write_text("[pipeline]\ntau = 0.55\n")
        via_file, via_flag = tmp_path / "f.json", tmp_path / "g.json"
        run_cli(*self.detect_args(bench_dir, via_file, "--config", str(config)), check=0)
        run_cli(*self.detect_args(bench_dir, via_flag, "--tau", "0.55"), check=0)
        assert via_file.read_bytes() == via_flag.read_bytes()

    def test_flag_overrides_config_file(self, bench_dir, tmp_path):
        config = tmp_path / "run.toml"
        config.write_text("[pipeline]\ntau = 0.99\n")
        out, baseline = tmp_path / "o.json", tmp_path / "b.json"
        run_cli(*self.detect_args(bench_dir, out, "--config", str(config), "--tau", "0.4"), check=0)
        run_cli(*self.detect_args(bench_dir, baseline), check=0)
        assert out.read_bytes() == baseline.read_bytes()

    def test_config_echoed_to_stderr(self, bench_dir, tmp_path):
        proc = run_cli(*self.detect_args(bench_dir, tmp_path / "r.json", "--tau", "0.7"), check=0)
        assert "tau=0.7" in proc.stderr

    def test_missing_embedding_is_a_data_error(self, bench_dir, tmp_path):
        # strip one retained proposal's row out of the archive
        from protodetect import read_embedding_archive, write_embedding_archive, EmbeddingArchive
        archive = read_embedding_archive(bench_dir["embeddings"])
        kept = [i for i, key in enumerate(archive.keys) if key != archive.keys[0]]
        pruned = EmbeddingArchive(
            keys=[archive.keys[i] for i in kept],
            matrix=archive.matrix[kept],
            extractor=archive.extractor,
            crop_policy=archive.crop_policy,
            storage_dtype=archive.storage_dtype,
        )
        pruned_path = tmp_path / "pruned.dpme"
        write_embedding_archive(pruned, pruned_path)
        proc = run_cli("detect",
                       "--proposals", bench_dir["proposals"],
                       "--embeddings", str(pruned_path),
                       "--store", bench_dir["store"],
                       "--out", str(tmp_path / "r.json"))
        assert proc.returncode == 5
        assert "no embedding for retained proposal" in proc.stderr

    def test_support_keyed_archive_rejected(self, bench_dir, tmp_path):
        proc = run_cli("detect",
                       "--proposals", bench_dir["proposals"],
                       "--embeddings", bench_dir["supports"],
                       "--store", bench_dir["store"],
                       "--out", str(tmp_path / "r.json"))
        assert proc.returncode == 4
        assert "support-keyed" in proc.stderr


class TestFilterProposals:
    def test_emits_retained_indices(self, bench_dir, tmp_path):
        out = tmp_path / "retained.json"
        proc = run_cli("filter-proposals", "--proposals", bench_dir["proposals"],
                       "--out", str(out), check=0)
        payload = json.loads(out.read_text())
        assert len(payload) == 5  # one entry per image
        for entry in payload:
            assert set(entry) == {"scene_id", "image_id", "retained"}
            assert entry["retained"] == sorted(entry["retained"])
        assert "retained" in proc.stdout

    def test_empty_archive_gives_empty_list(self, tmp_path):
        empty = tmp_path / "none.jsonl"
        empty.write_text("")
        out = tmp_path / "retained.json"
        run_cli("filter-proposals", "--proposals", str(empty), "--out", str(out), check=0)
        assert json.loads(out.read_text()) == []


class TestEvaluate:
    def test_perfect_results_score_one(self, bench_dir, tmp_path):
        results = tmp_path / "results.json"
        run_cli("detect",
                "--proposals", bench_dir["proposals"],
                "--embeddings", bench_dir["embeddings"],
                "--store", bench_dir["store"],
                "--out", str(results), check=0)
        report_path = tmp_path / "report.json"
        csv_path = tmp_path / "report.csv"
        proc = run_cli("evaluate", "--results", str(results), "--gt", bench_dir["gt"],
                       "--out", str(report_path), "--csv", str(csv_path), check=0)
        report = json.loads(report_path.read_text())
        assert report["mean_ap"] == 1.0
        assert "mean AP" in proc.stdout
        assert csv_path.read_text().startswith("kind,key,ap")

    def test_shuffled_results_give_identical_report(self, bench_dir, tmp_path):
        results = tmp_path / "results.json"
        run_cli("detect",
                "--proposals", bench_dir["proposals"],
                "--embeddings", bench_dir["embeddings"],
                "--store", bench_dir["store"],
                "--out", str(results), check=0)
        report_a = tmp_path / "a.json"
        run_cli("evaluate", "--results", str(results), "--gt", bench_dir["gt"],
                "--out", str(report_a), check=0)
        payload = json.loads(results.read_text())
        rng = np.random.default_rng(3)
        rng.shuffle(payload)
        shuffled = tmp_path / "shuffled.json"
        shuffled.write_text(json.dumps(payload))
        report_b = tmp_path / "b.json"
        run_cli("evaluate", "--results", str(shuffled), "--gt", bench_dir["gt"],
                "--out", str(report_b), check=0)
        assert report_a.read_bytes() == report_b.read_bytes()

    def test_matches_in_process_evaluation(self, bench_dir, tmp_path):
        results = tmp_path / "results.json"
        run_cli("detect",
                "--proposals", bench_dir["proposals"],
                "--embeddings", bench_dir["embeddings"],
                "--store", bench_dir["store"],
                "--out", str(results), check=0)
        report_path = tmp_path / "report.json"
        run_cli("evaluate", "--results", str(results), "--gt", bench_dir["gt"],
                "--out", str(report_path), check=0)
        from protodetect import DetectionRecord, evaluate
        records = read_bop_results(results)
        gts, _ = read_ground_truth(bench_dir["gt"])
        report = evaluate(
            [DetectionRecord(r.scene_id, r.image_id, r.category_id, r.bbox, r.score)
             for r in records],
            gts,
        )
        assert json.loads(report_path.read_text()) == report.to_dict()


class TestPrototypeSimilarity:
    def test_orthogonal_store_gives_identity(self, tmp_path):
        store = PrototypeStore(dimension=3)
        for i in range(3):
            vec = np.zeros(3)
            vec[i] = 1.0
            store.add(Prototype(class_id=i + 1, vector=vec, k_support=1))
        store_path = tmp_path / "ortho.dpmp"
        save_store(store, store_path)
        out = tmp_path / "sim.csv"
        run_cli("prototype-similarity", "--store", str(store_path), "--out", str(out), check=0)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "class_id,1,2,3"
        matrix = np.array([[float(v) for v in line.split(",")[1:]] for line in lines[1:]])
        np.testing.assert_allclose(matrix, np.eye(3), atol=1e-12)

    def test_csv_parses_back_symmetric(self, bench_dir, tmp_path):
        out = tmp_path / "sim.csv"
        run_cli("prototype-similarity", "--store", bench_dir["store"], "--out", str(out), check=0)
        lines = out.read_text().strip().splitlines()
        matrix = np.array([[float(v) for v in line.split(",")[1:]] for line in lines[1:]])
        np.testing.assert_allclose(matrix, matrix.T, atol=1e-9)
        np.testing.assert_allclose(np.diag(matrix), 1.0, atol=1e-9)


class TestValidateCommand:
    def test_clean_files_exit_zero(self, bench_dir):
        proc = run_cli("validate", bench_dir["store"], bench_dir["gt"],
                       bench_dir["proposals"], check=0)
        assert proc.stdout.count("clean") == 3

    def test_violations_exit_six(self, bench_dir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps([
            {"scene_id": 1, "image_id": 0, "category_id": 1, "bbox": [0, 0, 5, 5]},
        ]))
        proc = run_cli("validate", str(bad), "--format", "results")
        assert proc.returncode == 6
        assert "score" in proc.stdout

    def test_mixed_clean_and_dirty_exits_six(self, bench_dir, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[pipeline]\ntau = 7.0\n")
        proc = run_cli("validate", bench_dir["store"], str(bad))
        assert proc.returncode == 6
        assert "clean" in proc.stdout


class TestExitCodes:
    def test_missing_file_is_io_error(self, tmp_path):
        proc = run_cli("build-prototypes", "--supports", str(tmp_path / "absent.dpme"),
                       "--out", str(tmp_path / "x.dpmp"))
        assert proc.returncode == 3

    def test_bad_magic_is_format_error(self, tmp_path):
        junk = tmp_path / "junk.dpme"
        junk.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
        proc = run_cli("build-prototypes", "--supports", str(junk),
                       "--out", str(tmp_path / "x.dpmp"))
        assert proc.returncode == 4

    def test_unknown_flag_is_usage_error(self):
        proc = run_cli("detect", "--nonsense")
        assert proc.returncode == 2

    def test_missing_subcommand_is_usage_error(self):
        proc = run_cli()
        assert proc.returncode == 2

    def test_version_exits_zero(self):
        proc = run_cli("--version", check=0)
        assert "protodetect" in proc.stdout

    def test_help_exits_zero(self):
        run_cli("--help", check=0)
        run_cli("detect", "--help", check=0)

    def test_console_script_is_installed(self):
        proc = subprocess.run(["protodetect", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0
