import hashlib
import json

import pytest
import yaml

from tplf.cli import main
from tplf.errors import ConfigurationError
from tplf.experiment import DEFAULTS, load_plan, prepare_data, resolve_plan, run_experiment, validate_plan
from tplf.io import load_checkpoint, read_metrics, write_conll, write_labeled_texts, write_pairs
from tplf.synthetic import SyntheticWorld


def toy_plan(mode="MTPF-TPL", **extra):
    plan = {
        "mode": mode,
        "seed": 3,
        "encoder": {"num_layers": 2, "hidden_dim": 16, "num_heads": 2, "ffn_dim": 32, "max_seq_len": 40},
        "train": {"total_steps": 4, "ner_batch_size": 4, "tc_batch_size": 4, "lr": 1e-3, "snapshot_every": 2},
        "data": {"synthetic": {"n_ner": 20, "n_pairs": 20, "n_entities": 4}},
    }
    plan.update(extra)
    return plan


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestPlan:
    def test_defaults_mirror_reference_recipe(self):
        t = DEFAULTS["train"]
        assert (t["lr"], t["ner_batch_size"], t["tc_batch_size"], t["total_steps"]) == (2e-5, 256, 1024, 100_000)
        assert DEFAULTS["pseudo_label"]["k"] == 200

    def test_schema_errors_name_the_field(self):
        with pytest.raises(ConfigurationError, match="train"):
            validate_plan({"mode": "MTPF", "train": {"lr": -1}})
        with pytest.raises(ConfigurationError, match="mode"):
            validate_plan({"mode": "nonsense"})
        with pytest.raises(ConfigurationError):
            validate_plan({"mode": "MTPF", "typo_section": {}})
        with pytest.raises(ConfigurationError, match="sweep"):
            validate_plan({"mode": "sweep"})

    def test_precedence(self):
        plan = resolve_plan({"mode": "MTPF", "seed": 5, "train": {"lr": 0.1}}, {"seed": 9, "threads": None})
        assert plan["seed"] == 9 and plan["train"]["lr"] == 0.1 and plan["threads"] == 1
        assert plan["train"]["weight_decay"] == 0.01

    def test_mode_from_overrides(self):
        assert resolve_plan({"seed": 1}, {"mode": "PF-TC"})["mode"] == "PF-TC"

    def test_load_plan(self, tmp_path):
        (tmp_path / "p.yaml").write_text("mode: MTPF\ntrain: {lr: 0.5}\n")
        assert load_plan(tmp_path / "p.yaml")["train"]["lr"] == 0.5
        (tmp_path / "bad.yaml").write_text("- just\n- a list\n")
        with pytest.raises(ConfigurationError):
            load_plan(tmp_path / "bad.yaml")


class TestData:
    def test_env_root(self, tmp_path, monkeypatch):
        world = SyntheticWorld.create(0, n_entities=3)
        s, t = world.ner_corpus(5, seed=1)
        write_conll(tmp_path / "ner.conll", s, t)
        write_pairs(tmp_path / "pairs.jsonl", [(" ".join(a), " ".join(b)) for a, b in
                                               world.pair_corpus(5, seed=2, styles=("synonym",))["synonym"]])
        plan = resolve_plan({"mode": "MTPF", "data": {"ner": {"x": "ner.conll"}, "pairs": {"y": "pairs.jsonl"}}})
        with pytest.raises(ConfigurationError, match="not found"):
            prepare_data(plan, tmp_path / "elsewhere")
        monkeypatch.setenv("TPLF_DATA_DIR", str(tmp_path))
        data = prepare_data(plan, tmp_path / "elsewhere")
        assert len(data.ner_sentences["x"]) == 5 and len(data.pairs["y"]) == 5
        assert set(data.hashes) == {"ner:x", "pairs:y"}

    def test_mode_needs_data(self):
        plan = resolve_plan({"mode": "MTPF", "data": {"pairs": {"y": "/nonexistent"}}})
        with pytest.raises(ConfigurationError):
            prepare_data(plan)


class TestRunExperiment:
    def test_pf_tc_has_no_ner_loss(self, tmp_path):
        res = run_experiment(toy_plan("PF-TC"), tmp_path)
        train = read_metrics(res.metrics_paths[0], phase="train")
        assert len(train) == 4 and all("loss_ner" not in r["metrics"] for r in train)
        assert all("loss_tc" in r["metrics"] for r in train)

    def test_snapshots_and_analysis(self, tmp_path):
        res = run_experiment(toy_plan("PF-NER", analysis={"n_sentences": 10, "n_variants": 2}), tmp_path)
        snaps = sorted(p.name for p in (tmp_path / "snapshots").iterdir())
        assert snaps == ["step_00000000.tplf", "step_00000002.tplf", "step_00000004.tplf"]
        assert load_checkpoint(tmp_path / "snapshots" / snaps[-1]).config["step"] == 4
        curves = (tmp_path / "curves.csv").read_text().splitlines()
        assert curves[0] == "step,homogeneity,perturbation_similarity" and len(curves) == 4
        prov = read_metrics(res.metrics_paths[0], phase="provenance")[0]["metrics"]
        assert prov["mode"] == "PF-NER" and "ner:synthetic" in prov["datasets"]

    def test_deterministic_metrics(self, tmp_path):
        plan = toy_plan("MTPF-TPL", downstream={"synthetic": {"n_ner_train": 10, "n_ner_test": 10, "n_tc_train": 10,
                                                              "n_tc_test": 10},
                                                "adapt": {"head_epochs": 1, "joint_epochs": 1, "lr": 1e-3,
                                                          "lora_rank": 4, "lora_alpha": 8}})
        a = run_experiment(plan, tmp_path / "a")
        b = run_experiment(plan, tmp_path / "b")
        assert sha(a.metrics_paths[0]) == sha(b.metrics_paths[0])
        assert sha(tmp_path / "a" / "final.tplf") == sha(tmp_path / "b" / "final.tplf")
        assert {"ner_f1", "tc_accuracy", "combined"} <= set(a.runs[0])

    @pytest.mark.filterwarnings("ignore:LoRA rank")
    def test_sweep(self, tmp_path):
        plan = toy_plan("sweep", sweep={"tpl_layers": [1, 2, 4, "all"]},
                        downstream={"synthetic": {"n_ner_train": 10, "n_ner_test": 10, "n_tc_train": 10,
                                                  "n_tc_test": 10},
                                    "adapt": {"head_epochs": 1, "joint_epochs": 1, "lr": 1e-3}})
        plan["encoder"]["num_layers"] = 4
        plan["train"]["lr"] = 1e-2
        res = run_experiment(plan, tmp_path)
        assert [r["tpl_layers"] for r in res.runs] == [1, 2, 4, "all"]
        assert all({"ner_f1", "tc_accuracy", "combined"} <= set(r) for r in res.runs)
        layers = [load_checkpoint(tmp_path / f"tpl_layers_{v}" / "final.tplf").config["lora_spec"]["target_layers"]
                  for v in (1, 2, 4, "all")]
        assert layers == [[3], [2, 3], [0, 1, 2, 3], [0, 1, 2, 3]]
        assert len((tmp_path / "results.csv").read_text().splitlines()) == 5
        assert json.loads((tmp_path / "results.json").read_text())["runs"] == res.runs

    def test_f64_writes_no_checkpoint(self, tmp_path):
        run_experiment(toy_plan("PF-TC", precision="f64-test"), tmp_path)
        assert not list(tmp_path.rglob("*.tplf"))

    def test_stop_file(self, tmp_path):
        (tmp_path / "STOP").touch()
        res = run_experiment(toy_plan("PF-TC"), tmp_path)
        assert res.runs[0]["stopped_early"] and res.runs[0]["steps"] == 0
        assert (tmp_path / "final.tplf").exists()


@pytest.fixture
def plan_file(tmp_path):
    p = tmp_path / "plan.yaml"
    p.write_text(yaml.safe_dump(toy_plan("MTPF")))
    return p


class TestCli:
    def test_bad_plan_fails_before_compute(self, tmp_path, capsys):
        p = tmp_path / "plan.yaml"
        p.write_text(yaml.safe_dump({"mode": "MTPF", "train": {"total_steps": -3}}))
        assert main(["mtpf", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
        assert "plan invalid at train/total_steps" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_flag_validation(self, plan_file, tmp_path):
        assert main(["mtpf", "--config", str(plan_file), "--threads", "0"]) == 2
        assert main(["mtpf", "--config", str(plan_file), "--seed", str(2**64)]) == 2
        with pytest.raises(SystemExit):
            main(["mtpf", "--config", str(plan_file), "--precision", "f16"])

    @pytest.mark.filterwarnings("ignore:LoRA rank")
    def test_pipeline(self, plan_file, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["mtpf", "--config", str(plan_file), "--out", str(out), "--mode", "MTPF-TPL",
                     "--tpl-layers", "1", "--steps", "3", "--seed", "7"]) == 0
        runs = json.loads(capsys.readouterr().out)
        assert runs[0]["mode"] == "MTPF-TPL" and runs[0]["steps"] == 3
        assert load_checkpoint(out / "final.tplf").config["plan"]["seed"] == 7

        assert main(["export", "--checkpoint", str(out / "final.tplf"), "--out", str(tmp_path / "bundle")]) == 0
        assert json.loads(capsys.readouterr().out)["tasks"] == ["NER", "TC"]

        world = SyntheticWorld.create(3, n_entities=4)
        s, t = world.ner_corpus(8, seed=4)
        write_conll(tmp_path / "tr.conll", s, t)
        write_conll(tmp_path / "te.conll", s, t)
        for ckpt in (out / "final.tplf", tmp_path / "bundle"):
            assert main(["adapt-ner", "--checkpoint", str(ckpt), "--train", str(tmp_path / "tr.conll"),
                         "--test", str(tmp_path / "te.conll"), "--head-epochs", "1", "--joint-epochs", "1",
                         "--fraction", "0.5", "--out", str(tmp_path / "an")]) == 0
            assert json.loads(capsys.readouterr().out)["n_train"] == 4

        sents, labels = world.topic_classification(10, seed=5)
        write_labeled_texts(tmp_path / "tc.jsonl", [" ".join(x) for x in sents], labels)
        assert main(["adapt-tc", "--checkpoint", str(tmp_path / "bundle"), "--train", str(tmp_path / "tc.jsonl"),
                     "--test", str(tmp_path / "tc.jsonl"), "--out", str(tmp_path / "at")]) == 0
        assert 0 <= json.loads(capsys.readouterr().out)["tc_accuracy"] <= 1

        assert main(["analyze", "--snapshots", str(out / "snapshots"), "--sentences", str(tmp_path / "te.conll"),
                     "--out", str(tmp_path / "ana"), "--n-variants", "2"]) == 0
        rows = json.loads(capsys.readouterr().out)
        assert [r["step"] for r in rows] == [0, 2, 3]
        assert (tmp_path / "ana" / "analysis.csv").exists()

    def test_pretrain_subcommands_fix_mode(self, plan_file, tmp_path, capsys):
        assert main(["pretrain-tc", "--config", str(plan_file), "--out", str(tmp_path / "o"), "--steps", "1"]) == 0
        assert json.loads(capsys.readouterr().out)[0]["mode"] == "PF-TC"

    def test_missing_inputs(self, tmp_path, capsys):
        assert main(["analyze", "--snapshots", str(tmp_path), "--sentences", str(tmp_path / "none.conll")]) == 1
        assert "error" in capsys.readouterr().err
        assert main(["export", "--checkpoint", str(tmp_path / "none.tplf")]) == 1
        assert main(["mtpf"]) == 1
