import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import hygrec.kernels as K
from hygrec import harness
from hygrec.config import RunConfig, apply_overrides, load_config
from hygrec.errors import ConfigError, NonFiniteLoss
from hygrec.harness import (
    Example,
    build_system,
    dataset_from_synthetic,
    evaluate_system,
    graph_sessions,
    popularity_counts,
    render_report,
    respond_session,
    score_examples,
    simulate_loop,
    split_examples,
    train,
    truth_table,
)

DATA = Path(__file__).parent / "data"

TINY = dict(dim=8, heads=2, batch_size=8, lr=5e-3, trunc_len=5, k_list=(5, 10), khop=1)


def tiny_cfg(**kw):
    merged = {**TINY, **kw}
    return RunConfig(**merged).validate()


class TestConfig:
    def test_defaults_valid(self):
        RunConfig().validate()

    def test_file_parsing(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text(
            "# comment\n"
            "dim=32\n"
            "tau=0.2\n"
            "active_views=item,word\n"
            "k_list=5,10\n"
            "cl_level_mean=true\n"
            "sessions=/x/s.jsonl\n"
        )
        cfg = load_config(path)
        assert cfg.dim == 32
        assert cfg.tau == 0.2
        assert cfg.active_views == ("item", "word")
        assert cfg.k_list == (5, 10)
        assert cfg.cl_level_mean is True
        assert cfg.sessions == "/x/s.jsonl"

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("nonsense=1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_values_rejected(self):
        for kw in (
            {"tau": -1.0},
            {"gamma": 1.5},
            {"dim": 10, "heads": 4},
            {"batch_size": 1},
            {"user_model": "psychic"},
            {"drop_hyper": ("entity", "item", "word")},
            {"active_views": ("item",)},
        ):
            with pytest.raises(ConfigError):
                RunConfig(**kw).validate()

    def test_seed_required_for_training(self):
        with pytest.raises(ConfigError):
            RunConfig().validate(require_seed=True)

    def test_overrides(self):
        cfg = apply_overrides(RunConfig(), epochs=3, seed=None)
        assert cfg.epochs == 3
        assert cfg.seed is None


class TestSplitProtocol:
    def test_last_truth_held_out(self, tiny_synthetic):
        train_ex, eval_ex = split_examples(tiny_synthetic.sessions)
        assert len(eval_ex) == len(tiny_synthetic.sessions)
        assert len(train_ex) == len(tiny_synthetic.sessions)
        by_sid = {e.session_id: e for e in eval_ex}
        for rec in tiny_synthetic.sessions:
            assert by_sid[rec.session_id].turn_index == rec.ground_truth[-1][0]

    def test_graph_sessions_hide_eval_turn(self, tiny_synthetic):
        for rec, cut in zip(tiny_synthetic.sessions, graph_sessions(tiny_synthetic.sessions)):
            eval_turn, eval_item = rec.ground_truth[-1]
            assert len(cut.turns) == eval_turn
            assert all(item != eval_item or True for t in cut.turns for item in t.item_ids)
            assert (eval_turn, eval_item) not in cut.ground_truth

    def test_popularity_counts(self):
        from test_corpus import make_session

        recs = [make_session("a", [[1, 1], [2]], truths=[(1, 2)])]
        counts = popularity_counts(recs)
        assert counts == {1: 2, 2: 2}


class TestTraining:
    def test_zero_epochs_is_initialization(self, tiny_synthetic):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=5, epochs=0)
        system = train(cfg, ds)
        fresh = K.ParameterStore(5)
        for name, p in system.store.params.items():
            expected = fresh.get(name, p.value.shape).value
            assert np.array_equal(p.value, expected)

    def test_same_seed_bitwise_identical_checkpoints(self, tiny_synthetic, tmp_path):
        ds = dataset_from_synthetic(tiny_synthetic)
        paths = []
        for run in range(2):
            cfg = tiny_cfg(seed=9, epochs=4)
            system = train(cfg, ds)
            path = tmp_path / f"run{run}.bin"
            system.store.save(path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_rec_loss_strictly_decreases(self, tiny_synthetic):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=3, epochs=10, tasks="rec")
        system = train(cfg, ds)
        losses = [e["loss"] for e in system.epoch_log]
        assert len(losses) == 10
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_non_finite_loss_aborts(self, tiny_synthetic):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=4, epochs=1)
        system = build_system(cfg, ds)
        system.store.get("emb/item", (len(system.catalog), cfg.dim)).value[0, 0] = np.inf
        sessions_by_id = {rec.session_id: rec for rec in ds.sessions}
        train_ex, _ = split_examples(ds.sessions)
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteLoss):
            harness._rec_epoch(system, train_ex, sessions_by_id, epoch=0)

    def test_conv_epoch_runs_and_logs(self, tiny_synthetic):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=6, epochs=2)
        system = train(cfg, ds)
        tasks = [e["task"] for e in system.epoch_log]
        assert tasks == ["rec", "conv"]
        assert all(np.isfinite(e["loss"]) for e in system.epoch_log)


class TestEvaluation:
    def test_metric_keys_and_ranges(self, tiny_synthetic):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=7, epochs=2)
        system = train(cfg, ds)
        metrics = evaluate_system(system, ds)
        assert set(metrics) == {
            "R@5", "MRR@5", "NDCG@5", "R@10", "MRR@10", "NDCG@10"
        }
        for value in metrics.values():
            assert 0.0 <= value <= 1.0

    def test_lists_align_with_truth(self, tiny_synthetic):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=7, epochs=0)
        system = train(cfg, ds)
        _, eval_ex = split_examples(ds.sessions)
        lists = score_examples(system, ds.sessions, eval_ex, 10)
        truth = truth_table(ds.sessions)
        assert all((rl.session_id, rl.turn_index) in truth for rl in lists)
        assert all(len(rl.item_ids) == 10 for rl in lists)


class TestLoop:
    def _trained(self, tiny_synthetic, epochs=2, **kw):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=8, epochs=epochs, turns=3, **kw)
        system = train(cfg, ds)
        return cfg, ds, system

    def test_single_turn_equals_static_evaluation(self, tiny_synthetic):
        cfg, ds, system = self._trained(tiny_synthetic)
        cfg1 = apply_overrides(cfg, turns=1)
        trace = simulate_loop(cfg1, ds, store=system.store, ranker="trained")
        assert len(trace["turns"]) == 1

        from hygrec.fairness import PopularityTable, fairness_report

        sessions = graph_sessions(ds.sessions)
        examples = [Example(rec.session_id, len(rec.turns), 0) for rec in sessions]
        fresh = build_system(cfg1, ds, store=system.store)
        lists = score_examples(fresh, sessions, examples, max(cfg1.k_list))
        pop = PopularityTable.from_counts(
            popularity_counts(sessions), fresh.catalog
        )
        expected = fairness_report(lists, pop, len(fresh.catalog), cfg1.k_list)
        assert trace["turns"][0]["fairness"] == expected

    def test_same_seed_identical_traces(self, tiny_synthetic):
        cfg, ds, system = self._trained(tiny_synthetic)
        t1 = simulate_loop(cfg, ds, store=system.store, ranker="trained")
        t2 = simulate_loop(cfg, ds, store=system.store, ranker="trained")
        assert json.dumps(t1, sort_keys=True) == json.dumps(t2, sort_keys=True)

    def test_incremental_matches_full_rebuild(self, tiny_synthetic):
        cfg, ds, system = self._trained(tiny_synthetic)
        fast = simulate_loop(cfg, ds, store=system.store, ranker="trained")
        slow = simulate_loop(
            cfg, ds, store=system.store, ranker="trained", full_rebuild=True
        )
        assert json.dumps(fast, sort_keys=True) == json.dumps(slow, sort_keys=True)

    def test_popularity_baseline_concentrates(self, tiny_synthetic):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=8, turns=4, user_model="always-accept-top1")
        trace = simulate_loop(cfg, ds, ranker="popularity")
        ginis = [t["fairness"]["G@10"] for t in trace["turns"]]
        assert all(a <= b + 1e-12 for a, b in zip(ginis, ginis[1:]))
        assert trace["turns"][0]["accepted"]  # top-1 always accepted

    def test_preference_threshold_accepts_matching_cluster(self, tiny_synthetic):
        cfg, ds, system = self._trained(tiny_synthetic)
        trace = simulate_loop(cfg, ds, store=system.store, ranker="trained")
        items = ds.latents["items"]
        users = ds.latents["users"]
        for turn in trace["turns"]:
            for sid, accepted in turn["accepted"].items():
                for item in accepted:
                    dot = float(
                        np.asarray(users[sid]) @ np.asarray(items[str(item)])
                    )
                    assert dot > ds.latents["threshold"]


class TestRespond:
    def test_greedy_decode_shape(self, tiny_synthetic):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=2, epochs=2)
        system = train(cfg, ds)
        steps = respond_session(system, ds.sessions[0], max_len=6)
        assert 1 <= len(steps) <= 6
        for step in steps:
            assert 0 <= step["token_id"] < len(system.vocab)
            assert np.isfinite(step["entropy"])
        assert [s["step"] for s in steps] == list(range(len(steps)))

    def test_deterministic(self, tiny_synthetic):
        ds = dataset_from_synthetic(tiny_synthetic)
        cfg = tiny_cfg(seed=2, epochs=1)
        system = train(cfg, ds)
        a = respond_session(system, ds.sessions[1], max_len=5)
        b = respond_session(system, ds.sessions[1], max_len=5)
        assert a == b


class TestReport:
    GOLDEN_PAYLOAD = {
        "MRR@10": 0.25,
        "R@10": 0.5,
        "NDCG@10": 1.0 / 3.0,
        "catalog": 16,
        "名前": "résumé ✓",
    }

    def test_golden_bytes(self):
        js, table = render_report(self.GOLDEN_PAYLOAD)
        assert js == (DATA / "golden_report.json").read_text(encoding="utf-8")
        assert table == (DATA / "golden_report.txt").read_text(encoding="utf-8")

    def test_json_round_trip(self):
        js, _ = render_report(self.GOLDEN_PAYLOAD)
        assert json.loads(js) == self.GOLDEN_PAYLOAD

    def test_empty_metrics(self):
        js, table = render_report({})
        assert json.loads(js) == {}
        assert table == "\n"

    def test_trace_table_shape(self):
        trace = {
            "ranker": "popularity",
            "user_model": "always-accept-top1",
            "turns": [
                {"turn": 0, "fairness": {"G@5": 0.5}, "ranking": {"R@5": 0.1}, "accepted": {}},
            ],
        }
        _, table = render_report(trace)
        lines = table.splitlines()
        assert lines[0].startswith("loop ranker=popularity")
        assert "turn=000" in lines[1]
        assert "G@5=0.500000" in lines[1]
        assert "R@5=0.100000" in lines[1]


def run_cli(*argv):
    return subprocess.run(
        [sys.executable, "-m", "hygrec.cli", *argv], capture_output=True, text=True
    )


class TestCLI:
    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("tau=-3\n")
        out = tmp_path / "x.bin"
        result = run_cli("train", "--config", str(bad), "--seed", "1", "--out", str(out))
        assert result.returncode == 2

    def test_data_error_exit_code(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text(
            "sessions=/nonexistent.jsonl\n"
            "dbpedia_triples=/n.tsv\ndbpedia_nodes=/n.tsv\n"
            "conceptnet_triples=/n.tsv\nconceptnet_nodes=/n.tsv\n"
            "reviews=/n.jsonl\nlexicon_pos=/n.txt\nlexicon_neg=/n.txt\n"
        )
        result = run_cli(
            "train", "--config", str(cfg), "--seed", "1",
            "--out", str(tmp_path / "x.bin"),
        )
        assert result.returncode == 3

    def test_report_round_trip(self, tmp_path):
        src = tmp_path / "in.json"
        src.write_text(json.dumps({"R@10": 0.5}))
        out = tmp_path / "out.json"
        result = run_cli("report", "--input", str(src), "--out", str(out))
        assert result.returncode == 0
        assert "R@10" in result.stdout
        assert json.loads(out.read_text()) == {"R@10": 0.5}

    def test_full_pipeline(self, tmp_path):
        data_dir = tmp_path / "data"
        assert run_cli(
            "make-synthetic", "--seed", "21", "--out", str(data_dir),
            "--sessions", "16", "--items", "12",
        ).returncode == 0

        cfg = tmp_path / "run.txt"
        cfg.write_text(
            (data_dir / "config.txt").read_text()
            + "dim=8\nheads=2\nepochs=2\nbatch_size=8\nlr=5e-3\ntrunc_len=4\nk_list=5\nkhop=1\n"
        )
        graphs = tmp_path / "graphs"
        assert run_cli(
            "build-graphs",
            "--sessions", str(data_dir / "sessions.jsonl"),
            "--dbpedia", str(data_dir / "dbpedia_triples.tsv"),
            "--conceptnet", str(data_dir / "conceptnet_triples.tsv"),
            "--reviews", str(data_dir / "reviews.jsonl"),
            "--lexicon-pos", str(data_dir / "lexicon_pos.txt"),
            "--lexicon-neg", str(data_dir / "lexicon_neg.txt"),
            "--khop", "1", "--out", str(graphs),
        ).returncode == 0
        manifest = json.loads((graphs / "manifest.json").read_text())
        assert set(manifest["views"]) == {"entity", "item", "word", "review"}

        ckpt = tmp_path / "ckpt.bin"
        assert run_cli(
            "train", "--config", str(cfg), "--seed", "5", "--out", str(ckpt)
        ).returncode == 0

        lists = tmp_path / "lists.jsonl"
        assert run_cli(
            "recommend", "--checkpoint", str(ckpt), "--config", str(cfg),
            "--k", "5", "--out", str(lists),
        ).returncode == 0

        metrics = tmp_path / "metrics.json"
        assert run_cli(
            "evaluate", "--lists", str(lists),
            "--truth", str(data_dir / "sessions.jsonl"),
            "--k", "5", "--out", str(metrics),
        ).returncode == 0
        assert "R@5" in json.loads(metrics.read_text())

        fair = tmp_path / "fair.json"
        assert run_cli(
            "fairness", "--lists", str(lists),
            "--pop", str(graphs / "popularity.json"),
            "--catalog-size", "12", "--k", "5", "--out", str(fair),
        ).returncode == 0
        payload = json.loads(fair.read_text())
        assert set(payload) == {"A@5", "G@5", "L@5", "D@5"}

        result = run_cli(
            "respond", "--checkpoint", str(ckpt), "--config", str(cfg),
            "--session", str(data_dir / "sessions.jsonl"), "--max-len", "3",
        )
        assert result.returncode == 0
        assert result.stdout.count("\n") >= len(json.loads((metrics).read_text()))

        trace = tmp_path / "trace.json"
        assert run_cli(
            "simulate-loop", "--config", str(cfg), "--seed", "5",
            "--checkpoint", str(ckpt), "--turns", "2", "--out", str(trace),
        ).returncode == 0
        payload = json.loads(trace.read_text())
        assert len(payload["turns"]) == 2
