"""Experiment runner, reports, seed sweeps, config files and the CLI."""

import dataclasses
import json

import numpy as np
import pytest

from pec_cil import baselines, cli, data, harness, pec
from pec_cil.harness import ExperimentConfig

SMALL = dict(dataset="synthetic", num_classes=4, dim=6, n_per_class=60, n_test_per_class=30,
             mean_scale=4.0)


def small(**kw):
    return ExperimentConfig(**{**SMALL, "split": "4/1", **kw})


def fake_report(acc=0.5, seed=0):
    return harness.RunReport(acc, [acc, 1.0], [acc], 1.25, 10, 20, seed,
                             harness._jsonable(dataclasses.asdict(small(seed=seed))), 30, ["x"])


class TestAccuracy:
    def test_all_none_some(self):
        assert harness.final_average_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
        assert harness.final_average_accuracy([0, 0, 0], [1, 2, 3]) == 0.0
        preds = [0, 1, 2, 3, 4, 5, 6, 0, 0, 0]
        assert harness.final_average_accuracy(preds, list(range(10))) == 0.7

    def test_errors(self):
        with pytest.raises(ValueError):
            harness.final_average_accuracy([], [])
        with pytest.raises(ValueError):
            harness.final_average_accuracy([1], [1, 2])


class TestAggregate:
    def test_hand_values(self):
        a = harness.aggregate([0.90, 0.92, 0.94])
        assert a.mean == pytest.approx(0.92)
        assert a.stderr == pytest.approx(0.011547, abs=1e-6)
        assert not a.single_seed

    def test_single_seed(self):
        a = harness.aggregate([0.8])
        assert (a.stderr, a.single_seed, a.n) == (0.0, True, 1)

    def test_empty(self):
        with pytest.raises(ValueError):
            harness.aggregate([])


class TestReports:
    def test_json_round_trip(self, tmp_path):
        r = fake_report()
        harness.emit_report(r, tmp_path / "r.json")
        assert harness.read_report(tmp_path / "r.json") == [r]

    def test_csv_round_trip(self, tmp_path):
        rs = [fake_report(0.25, 0), fake_report(1 / 3, 1)]
        harness.emit_report(rs, tmp_path / "r.csv")
        assert harness.read_report(tmp_path / "r.csv") == rs

    def test_csv_header_golden(self, tmp_path):
        harness.emit_report(fake_report(), tmp_path / "r.csv")
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header == ("method,dataset,split,seed,accuracy,per_class_accuracy,per_task_accuracy,"
                          "wall_time,param_count,mac_count,mac_count_elementwise,notes,config")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            harness.emit_report(fake_report(), tmp_path / "r.txt")

    def test_sweep_csv(self, tmp_path):
        sweep = harness.SweepResult([fake_report(0.9, 0), fake_report(0.92, 1), fake_report(0.94, 2)],
                                    harness.aggregate([0.9, 0.92, 0.94]))
        harness.emit_sweep(sweep, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "method,dataset,split,n_seeds,seeds,mean_accuracy,stderr_accuracy,single_seed"
        row = lines[1].split(",")
        assert row[3:5] == ["3", "0 1 2"] and float(row[6]) == pytest.approx(0.011547, abs=1e-6)
        harness.emit_sweep(sweep, tmp_path / "s.json")
        assert json.loads((tmp_path / "s.json").read_text())["accuracy"]["n"] == 3


class TestConfig:
    def test_defaults(self):
        c = ExperimentConfig().resolved()
        assert (c.lr, c.batch_size, c.decay) == (0.01, 1, True)
        c = ExperimentConfig(dataset="cifar10").resolved()
        assert (c.lr, c.batch_size, c.decay) == (0.0003, 1, True)
        c = ExperimentConfig(method="labels_trick", split="5/2").resolved()
        assert (c.lr, c.batch_size) == (0.0001, 32)
        assert ExperimentConfig(method="slda").resolved().epsilon == 0.1

    def test_explicit_values_win(self):
        c = ExperimentConfig(lr=0.001, decay=False).resolved()
        assert (c.lr, c.decay) == (0.001, False)

    @pytest.mark.parametrize("kw", [
        dict(method="ewc"), dict(method="gp_check"), dict(dataset="svhn"), dict(split="3"),
        dict(budget="epochs"), dict(balancing="magic"), dict(budget="steps"),
        dict(method="slda", balancing="oracle"), dict(method="er", dataset="cifar10"),
    ])
    def test_rejected(self, kw):
        with pytest.raises(harness.ConfigError):
            ExperimentConfig(**kw).validate()

    def test_arch_overrides(self):
        a = ExperimentConfig(student_width=20, output_dim=50).arch((1, 28, 28))
        assert (a.student_width, a.teacher_width, a.output_dim) == (20, 5000, 50)

    def test_ini(self, tmp_path):
        p = tmp_path / "e.ini"
        p.write_text("[experiment]\nmethod = slda\ndataset = synthetic\nsplit = 5/2\n"
                     "epsilon = 0.3\ndecay = true\nhidden = 50, 20\nlr = none\n")
        c = harness.load_config(p, seed=4)
        assert (c.method, c.split, c.epsilon, c.decay, c.hidden, c.lr, c.seed) == \
            ("slda", "5/2", 0.3, True, (50, 20), None, 4)

    def test_ini_errors(self, tmp_path):
        p = tmp_path / "e.ini"
        p.write_text("[experiment]\nlearning_rate = 0.1\n")
        with pytest.raises(harness.ConfigError):
            harness.load_config(p)
        with pytest.raises(harness.ConfigError):
            harness.load_config(tmp_path / "missing.ini")
        p.write_text("[other]\n")
        with pytest.raises(harness.ConfigError):
            harness.load_config(p)


class TestRunExperiment:
    def test_pec_report(self):
        r = harness.run_experiment(small())
        assert 0.5 < r.accuracy <= 1.0
        assert len(r.per_class_accuracy) == 4 and len(r.per_task_accuracy) == 4
        assert r.accuracy == pytest.approx(np.mean(r.per_class_accuracy))  # equal test counts
        assert r.param_count == 4 * (6 * 10 + 10 + 2 * 10 + 10 * 32 + 32)
        assert r.config["lr"] == 0.001 and r.mac_count_elementwise >= r.mac_count

    def test_deterministic(self):
        a, b = harness.run_experiment(small(seed=3)), harness.run_experiment(small(seed=3))
        assert a.accuracy == b.accuracy and a.per_class_accuracy == b.per_class_accuracy

    def test_split_invariance(self):
        a = harness.run_experiment(small(split="4/1"))
        b = harness.run_experiment(small(split="2/2"))
        c = harness.run_experiment(small(split="1/4"))
        assert a.accuracy == b.accuracy == c.accuracy

    @pytest.mark.parametrize("method", ["nearest_mean", "slda", "finetune", "er", "labels_trick"])
    def test_baselines_run(self, method):
        r = harness.run_experiment(small(method=method, split="2/2"))
        assert 0.0 <= r.accuracy <= 1.0 and r.param_count > 0

    def test_split_must_cover_classes(self):
        with pytest.raises(harness.ConfigError):
            harness.run_experiment(small(split="3/1"))

    def test_missing_data(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            harness.run_experiment(ExperimentConfig(method="nearest_mean", data_dir=str(tmp_path)))

    def test_balancing_modes(self):
        base = small(imbalanced=True, n_per_class=80)
        plain = harness.run_experiment(base)
        oracle = harness.run_experiment(dataclasses.replace(base, balancing="oracle", cma_generations=30))
        buf = harness.run_experiment(dataclasses.replace(base, balancing="buffer", cma_generations=30,
                                                         buffer_capacity=50))
        assert oracle.accuracy >= plain.accuracy
        assert oracle.notes[0].startswith("scalars=") and buf.notes[0].startswith("scalars=")

    def test_equal_budgets(self, monkeypatch):
        steps = {}
        real = pec.PECClassifier.train_class

        def spy(self, c, x, y=None, budget=None, seed=0):
            steps[c] = budget.steps
            return real(self, c, x, y, budget, seed)

        monkeypatch.setattr(pec.PECClassifier, "train_class", spy)
        harness.run_experiment(small(imbalanced=True, budget="equal_budgets", n_per_class=80))
        assert set(steps.values()) == {40}  # class 1 is halved to 40 samples


class TestProtocol:
    def test_pec_sees_one_class_at_a_time(self, monkeypatch):
        train, test = data.synthetic_gaussians(4, 6, 4.0, 60, seed=2, n_test_per_class=30)
        by_class = {c: {r.tobytes() for r in train.x[train.y == c]} for c in range(4)}
        seen = []
        real = pec.PECClassifier.train_class

        def spy(self, c, x, y=None, budget=None, seed=0):
            assert all(r.tobytes() in by_class[c] for r in x)
            assert len(x) == 60
            seen.append(c)
            return real(self, c, x, y, budget, seed)

        monkeypatch.setattr(pec.PECClassifier, "train_class", spy)
        harness.run_experiment(small(split="2/2"), datasets=(train, test))
        assert sorted(seen) == [0, 1, 2, 3]

    @pytest.mark.parametrize("method", ["finetune", "er", "labels_trick"])
    def test_discriminative_batches_stay_in_task(self, monkeypatch, method):
        log = []
        real = baselines.DiscriminativeMLP.train_step

        def spy(self, x, y, lr, buffer=None, current_classes=None):
            log.append((tuple(current_classes), set(np.asarray(y).tolist()),
                        None if buffer is None else set(buffer.y)))
            return real(self, x, y, lr, buffer, current_classes)

        monkeypatch.setattr(baselines.DiscriminativeMLP, "train_step", spy)
        harness.run_experiment(small(method=method, split="2/2"))
        done = set()
        for classes, ys, buf in log:
            assert ys <= set(classes)
            if buf is not None:
                assert buf <= done | set(classes)  # replay only holds earlier or current data
            done |= ys
        assert log[0][0] != log[-1][0]


class TestSweep:
    def test_synthetic_sweep(self):
        s = harness.run_seed_sweep(small(method="slda"), [0, 1, 2])
        assert [r.seed for r in s.reports] == [0, 1, 2]
        assert s.accuracy.mean == pytest.approx(np.mean([r.accuracy for r in s.reports]))

    def test_no_seeds(self):
        with pytest.raises(ValueError):
            harness.run_seed_sweep(small(), [])

    def test_nearest_mean_has_no_seed_variance(self, mnist):
        s = harness.run_seed_sweep(ExperimentConfig(method="nearest_mean"), [0, 1, 2], datasets=mnist)
        assert s.accuracy.stderr == 0.0


def write_ini(tmp_path, **kw):
    body = "\n".join(f"{k} = {v}" for k, v in {**SMALL, **kw}.items())
    p = tmp_path / "e.ini"
    p.write_text("[experiment]\n" + body + "\n")
    return str(p)


class TestCLI:
    def test_parse_seeds(self):
        assert cli.parse_seeds("0..9") == list(range(10))
        assert cli.parse_seeds("1, 4 7") == [1, 4, 7]

    def test_run_json(self, tmp_path, capsys):
        out = tmp_path / "r.json"
        rc = cli.main(["run", "--config", write_ini(tmp_path, split="2/2"), "--method", "slda",
                       "--seed", "1", "--out", str(out)])
        assert rc == 0 and "accuracy" in capsys.readouterr().out
        r = harness.read_report(out)[0]
        assert (r.seed, r.config["method"], r.config["split"]) == (1, "slda", "2/2")

    def test_sweep_csv(self, tmp_path, capsys):
        out, runs = tmp_path / "s.csv", tmp_path / "runs.csv"
        rc = cli.main(["sweep", "--config", write_ini(tmp_path, split="4/1", method="nearest_mean"),
                       "--seeds", "0..2", "--out", str(out), "--runs-out", str(runs)])
        assert rc == 0
        assert "over 3 seeds" in capsys.readouterr().out
        assert len(harness.read_report(runs)) == 3

    def test_single_seed_flagged(self, tmp_path, capsys):
        cli.main(["sweep", "--config", write_ini(tmp_path, split="4/1", method="nearest_mean"),
                  "--seeds", "5"])
        assert "single seed" in capsys.readouterr().out

    def test_cifar_needs_extended(self, capsys):
        assert cli.main(["run", "--dataset", "cifar10"]) == 2
        assert "--extended" in capsys.readouterr().err

    def test_env_data_dir(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(data.DATA_DIR_ENV, str(tmp_path / "nowhere"))
        assert cli.main(["run", "--method", "nearest_mean", "--dataset", "mnist"]) == 2
        assert "nowhere" in capsys.readouterr().err

    def test_bad_config_exit_code(self, capsys):
        assert cli.main(["run", "--budget", "steps", "--dataset", "synthetic"]) == 2

    def test_gp_check_1(self, tmp_path, capsys):
        out = tmp_path / "p1.json"
        rc = cli.main(["gp-check", "--proposition", "1", "--n-train", "4", "--n-test", "6",
                       "--width", "16", "--max-steps", "300", "--out", str(out)])
        assert rc == 0 and "proposition 1" in capsys.readouterr().out
        rep = json.loads(out.read_text())
        assert rep["B"] == 64 and len(rep["s_B"]) == 6

    def test_gp_check_2(self, tmp_path, capsys):
        rc = cli.main(["gp-check", "--proposition", "2", "--Ns", "3", "12", "--repeats", "3",
                       "--width", "16", "--max-steps", "300"])
        text = capsys.readouterr().out
        assert "N=    3" in text and "N=   12" in text
        assert rc == (0 if "holds" in text else 1)
