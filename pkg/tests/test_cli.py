import json
from pathlib import Path

import pytest

from gradxkg.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main


def run(*argv):
    return main(list(argv))


def read_json(path):
    return json.loads(Path(path).read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train (tiny) shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    runs = root / "runs"
    assert run(
        "synth", "--nodes", "12", "--relations", "3", "--timesteps", "6",
        "--density", "0.01", "--chains", "8", "--seed", "5", "--out", str(data),
    ) == EXIT_OK
    assert run(
        "train", "--dataset", str(data), "--out", str(runs),
        "--window", "2", "--layers", "1", "--input-dim", "4", "--hidden-dim", "4",
        "--bases", "2", "--epochs", "2", "--lr", "0.05", "--seed", "3",
    ) == EXIT_OK
    return data, runs / "checkpoint.json", root


class TestIngest:
    def test_small_file(self, tmp_path):
        src = tmp_path / "quads.tsv"
        src.write_text("a\tr\tb\t0\nb\tr\tc\t1\n# comment\nc\tq\ta\t1\n")
        out = tmp_path / "ds"
        assert run("ingest", "--input", str(src), "--out", str(out)) == EXIT_OK
        assert (out / "quadruples.tsv").exists()
        manifest = read_json(out / "manifest.json")
        assert manifest["command"] == "ingest"
        assert "quadruples" in manifest["outputs"]

    def test_rerun_identical_checksums(self, tmp_path):
        src = tmp_path / "quads.tsv"
        src.write_text("a\tr\tb\t0\nb\tr\tc\t7\n")
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        assert run("ingest", "--input", str(src), "--out", str(out1)) == EXIT_OK
        assert run("ingest", "--input", str(src), "--out", str(out2)) == EXIT_OK
        m1, m2 = read_json(out1 / "manifest.json"), read_json(out2 / "manifest.json")
        assert {k: v["sha256"] for k, v in m1["outputs"].items()} == {
            k: v["sha256"] for k, v in m2["outputs"].items()
        }

    def test_snapshot_count_matches_distinct_timestamps(self, tmp_path):
        import numpy as np

        rng = np.random.default_rng(3)
        lines = []
        for _ in range(10000):
            s, o = rng.integers(0, 50, size=2)
            t = rng.choice([3, 14, 15, 92, 65])
            lines.append(f"n{s}\tr{rng.integers(0, 4)}\tn{o}\t{t}")
        src = tmp_path / "big.tsv"
        src.write_text("\n".join(lines) + "\n")
        out = tmp_path / "ds"
        assert run("ingest", "--input", str(src), "--out", str(out)) == EXIT_OK
        timestamps = (out / "timestamps.tsv").read_text().strip().splitlines()
        assert len(timestamps) == len({line.split("\t")[3] for line in lines})

    def test_parse_error_exit_code(self, tmp_path):
        src = tmp_path / "bad.tsv"
        src.write_text("a\tr\tb\t0\nnot enough fields\n")
        assert run("ingest", "--input", str(src), "--out", str(tmp_path / "ds")) == EXIT_DATA

    def test_missing_input_exit_code(self, tmp_path):
        assert run("ingest", "--input", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "d")) == EXIT_DATA


class TestSynthAndTrain:
    def test_artifacts_written(self, pipeline):
        data, ckpt, _ = pipeline
        assert (data / "chains.json").exists()
        assert ckpt.exists()
        curve = read_json(ckpt.parent / "loss_curve.json")
        assert len(curve["loss"]) == 2

    def test_chains_reference_real_edges(self, pipeline):
        data, _, _ = pipeline
        chains = read_json(data / "chains.json")
        quads = (data / "quadruples.tsv").read_text().strip().splitlines()
        assert len(chains) == 8
        assert all(len(c["cause_nodes"]) >= 3 for c in chains)
        assert len(quads) >= 24  # at least the planted edges


class TestExplainCommand:
    def test_writes_exactly_top_n_entries(self, pipeline, tmp_path):
        data, ckpt, _ = pipeline
        out = tmp_path / "exp"
        chains = read_json(data / "chains.json")
        s, r, o, t = chains[0]["query"]
        query = f"e{s},r{r},e{o},{t}"
        assert run(
            "explain", "--dataset", str(data), "--checkpoint", str(ckpt),
            "--query", query, "--top-n", "5", "--ig-samples", "8",
            "--seed", "1", "--out", str(out),
        ) == EXIT_OK
        payload = read_json(out / "saliency.json")
        assert len(payload["entries"]) == 5
        assert [e["rank"] for e in payload["entries"]] == [1, 2, 3, 4, 5]

    def test_unknown_entity_is_data_error(self, pipeline, tmp_path):
        data, ckpt, _ = pipeline
        assert run(
            "explain", "--dataset", str(data), "--checkpoint", str(ckpt),
            "--query", "nobody,r0,e1,4", "--out", str(tmp_path / "x"),
        ) == EXIT_DATA

    def test_invalid_window_is_data_error(self, pipeline, tmp_path):
        data, ckpt, _ = pipeline
        assert run(
            "explain", "--dataset", str(data), "--checkpoint", str(ckpt),
            "--query", "e0,r0,e1,0", "--out", str(tmp_path / "x"),
        ) == EXIT_DATA


class TestEvalCommand:
    def test_three_explainers_report(self, pipeline, tmp_path):
        data, ckpt, _ = pipeline
        out = tmp_path / "eval"
        assert run(
            "eval", "--dataset", str(data), "--checkpoint", str(ckpt),
            "--explainers", "gradxkg,perturbation,random",
            "--max-queries", "2", "--top-n", "3", "--ig-samples", "4",
            "--stability-trials", "2", "--seed", "11", "--out", str(out),
        ) == EXIT_OK
        text = (out / "report.txt").read_text()
        lines = text.strip().splitlines()
        assert len(lines) == 2 + 3
        for col in ("Fidelity", "Stability", "Time Cost"):
            assert col in lines[0]
        report = read_json(out / "report.json")
        assert set(report["explainers"]) == {"gradxkg", "perturbation", "random"}

    def test_unknown_explainer_is_data_error(self, pipeline, tmp_path):
        data, ckpt, _ = pipeline
        assert run(
            "eval", "--dataset", str(data), "--checkpoint", str(ckpt),
            "--explainers", "shapley", "--max-queries", "1", "--out", str(tmp_path / "x"),
        ) == EXIT_DATA


class TestExportCommand:
    def test_dot_written(self, pipeline, tmp_path):
        data, ckpt, _ = pipeline
        exp = tmp_path / "exp"
        chains = read_json(data / "chains.json")
        s, r, o, t = chains[0]["query"]
        run(
            "explain", "--dataset", str(data), "--checkpoint", str(ckpt),
            "--query", f"e{s},r{r},e{o},{t}", "--top-n", "3", "--ig-samples", "4",
            "--out", str(exp),
        )
        dot_path = tmp_path / "viz" / "saliency.dot"
        assert run(
            "export", "--input", str(exp / "saliency.json"),
            "--dataset", str(data), "--out", str(dot_path),
        ) == EXIT_OK
        dot = dot_path.read_text()
        assert dot.startswith("digraph")
        assert dot.count("doublecircle") == 3


class TestUsageErrors:
    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as exc:
            run("synth", "--wat", "1", "--out", "x")
        assert exc.value.code == 2

    def test_missing_subcommand_rejected(self):
        with pytest.raises(SystemExit) as exc:
            run()
        assert exc.value.code == 2

    def test_help_available_per_subcommand(self, capsys):
        for cmd in ("ingest", "synth", "train", "explain", "eval", "export"):
            with pytest.raises(SystemExit) as exc:
                run(cmd, "--help")
            assert exc.value.code == 0
            out = capsys.readouterr().out
            assert "--out" in out


def strip_volatile(payload):
    """Drop wall-time fields before comparing reports across runs."""
    if isinstance(payload, dict):
        return {
            k: strip_volatile(v)
            for k, v in payload.items()
            if k not in ("wall_time", "elapsed_seconds", "time_cost_ratio")
        }
    if isinstance(payload, list):
        return [strip_volatile(v) for v in payload]
    return payload


class TestReproducibility:
    def test_full_pipeline_bit_identical_reports(self, tmp_path):
        def one_run(tag):
            data = tmp_path / tag / "data"
            runs = tmp_path / tag / "runs"
            ev = tmp_path / tag / "eval"
            assert run(
                "synth", "--nodes", "10", "--relations", "3", "--timesteps", "5",
                "--density", "0.01", "--chains", "6", "--seed", "7", "--out", str(data),
            ) == EXIT_OK
            assert run(
                "train", "--dataset", str(data), "--out", str(runs),
                "--window", "2", "--layers", "1", "--input-dim", "3", "--hidden-dim", "3",
                "--bases", "1", "--epochs", "2", "--lr", "0.05", "--seed", "7",
            ) == EXIT_OK
            exp = tmp_path / tag / "explain"
            assert run(
                "explain", "--dataset", str(data), "--checkpoint", str(runs / "checkpoint.json"),
                "--query", "e0,r0,e1,3", "--ig-samples", "4", "--seed", "7", "--out", str(exp),
            ) == EXIT_OK
            assert run(
                "eval", "--dataset", str(data), "--checkpoint", str(runs / "checkpoint.json"),
                "--explainers", "gradxkg,random", "--max-queries", "2", "--top-n", "3",
                "--ig-samples", "4", "--stability-trials", "2", "--seed", "7", "--out", str(ev),
            ) == EXIT_OK
            return (
                strip_volatile(read_json(exp / "saliency.json")),
                strip_volatile(read_json(ev / "report.json")),
            )

        first = one_run("a")
        second = one_run("b")
        assert json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)
