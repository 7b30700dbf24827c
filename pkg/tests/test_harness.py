import math
from dataclasses import replace

import numpy as np
import pytest

from multivalid.cli import main
from multivalid.core import ConfigurationError, DomainError
from multivalid.harness import generators as gen
from multivalid.harness.config import ExperimentConfig
from multivalid.harness.experiments import run_experiment, run_trial
from multivalid.harness.io import SchemaError, column_groups, export_csv, ingest_csv


def test_iid_linear_noise_free_and_replayable():
    s = gen.gen_iid_linear(50, sigma_y2=0.0, seed=1)
    assert np.allclose(s.labels, s.features @ s.theta)
    assert s.features.shape == (50, 300)
    assert set(np.unique(s.features[:, :10])) <= {0.0, 1.0}
    assert s == gen.gen_iid_linear(50, sigma_y2=0.0, seed=1)
    assert s != gen.gen_iid_linear(50, sigma_y2=0.0, seed=2)
    with pytest.raises(DomainError):
        gen.gen_iid_linear(0)


def test_iid_linear_noise_variance_monte_carlo():
    n, s2 = 100_000, 0.2
    s = gen.gen_iid_linear(n, sigma_y2=s2, seed=3, n_binary=2, n_continuous=3)
    resid = s.labels - s.features @ s.theta
    se = s2 * math.sqrt(2 / (n - 1))
    assert abs(resid.var(ddof=1) - s2) <= 3 * se


def test_group_noise_membership_and_variance():
    s, groups = gen.gen_group_noise(100_000, seed=4, n_continuous=5)
    member = gen.binary_membership(s.features)
    assert len(groups) == 20
    assert (member.sum(axis=1) == 10).all()
    assert not (member[:, 0] & member[:, 1]).any() and (member[:, 0] | member[:, 1]).all()
    for x in s.features[:50]:
        assert groups.membership(x).tolist() == gen.binary_membership(x[None])[0].tolist()
    resid = s.labels - s.features @ s.theta
    gap = resid[member[:, 1]].var() - resid[member[:, 0]].var()
    # the variance gap between two halves of 1e5 points has standard error ~0.03
    assert gap == pytest.approx(3.0, abs=0.15)


def test_sorted_scores():
    s = gen.gen_sorted_scores()
    assert len(s) == 5283 and s.scores[0] == 0.0 and s.scores[-1] == 0.5
    assert np.all(np.diff(s.scores) > 0)
    assert gen.gen_sorted_scores(2).scores.tolist() == [0.0, 0.5]
    with pytest.raises(DomainError):
        gen.gen_sorted_scores(1)


def test_mod_groups():
    groups = gen.gen_mod_groups(20)
    assert [j + 1 for j in np.flatnonzero(groups.membership([6]))] == [1, 2, 3, 6]
    member = gen.mod_membership(6000, 20)
    assert member[:, 0].all()
    assert member[5].tolist() == groups.membership([6]).tolist()
    assert np.allclose(member.sum(axis=0), 6000 / np.arange(1, 21), atol=1)


def test_mod_group_noise_is_additive_per_group():
    r = np.zeros(12)
    noisy = gen.add_mod_group_noise(r, 3, seed=0, scale=1.0)
    # t = 1 is only in G1; t = 6 is in G1, G2 and G3
    member = gen.mod_membership(12, 3)
    assert np.count_nonzero(noisy) == 12
    assert member[5].sum() == 3 and member[0].sum() == 1


def test_volatility_scores_nonnegative_and_replayable():
    s = gen.gen_volatility_scores(500, seed=1)
    assert len(s) == 500 and (s.scores >= 0).all()
    assert s == gen.gen_volatility_scores(500, seed=1)


def test_shift_acceptance_ratio_monte_carlo():
    X = np.array([[0.5, 0, 0, 0, 0.2], [-0.3, 0, 0, 0, 0.9], [0.0, 0, 0, 0, 0.0]])
    beta = np.array(gen.DEFAULT_BETA)
    idx = gen.rejection_resample(gen.shift_weights(X, beta), 100_000, seed=0)
    counts = np.bincount(idx, minlength=3)
    expected = math.exp((X[0] - X[1]) @ beta)
    se = expected * math.sqrt(1 / counts[0] + 1 / counts[1])
    assert abs(counts[0] / counts[1] - expected) <= 4 * se


def test_shift_zero_beta_is_uniform_and_deterministic():
    base = gen.gen_shift_base(4, seed=0)
    shifted, idx = gen.gen_covariate_shift(base, beta=(0,) * 5, seed=1, size=40_000)
    counts = np.bincount(idx, minlength=4)
    assert np.all(np.abs(counts / 40_000 - 0.25) < 0.01)
    again, idx2 = gen.gen_covariate_shift(base, beta=(0,) * 5, seed=1, size=40_000)
    assert np.array_equal(idx, idx2) and shifted == again
    with pytest.raises(DomainError):
        gen.shift_weights(np.zeros((3, 2)), gen.DEFAULT_BETA)


def test_config_round_trip_and_validation(tmp_path):
    cfg = ExperimentConfig(experiment="group_noise", T=300, trials=2, eta=0.1,
                           methods=("mvp", "split"), rescale=True, smooth_noise=1e-3)
    path = tmp_path / "c.cfg"
    cfg.save(path)
    assert ExperimentConfig.load(path) == cfg
    assert ExperimentConfig.loads(ExperimentConfig().dumps()) == ExperimentConfig()
    with pytest.raises(ConfigurationError):
        ExperimentConfig(trials=0).resolve()
    with pytest.raises(ConfigurationError):
        ExperimentConfig(experiment="sorted_adversarial", methods=("weighted_split",)).resolve()
    with pytest.raises(ConfigurationError, match=":2:"):
        ExperimentConfig.loads("delta = 0.1\nm = forty\n")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.loads("nonsense = 1\n")


def test_ingest_scores_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("t,score\n1,0.1\n2,0.5\n3,2.0\n")
    s = ingest_csv(p)
    assert s.scores.tolist() == [0.1, 0.5, 2.0]
    p.write_text("t,score\n1,0.1\n2,abc\n")
    with pytest.raises(DomainError, match=":3:"):
        ingest_csv(p)
    p.write_text("t,score\n1,0.1\n2,0.2,9\n")
    with pytest.raises(DomainError, match=":3:"):
        ingest_csv(p)
    p.write_text("x_1,z\n1,2\n")
    with pytest.raises(SchemaError):
        ingest_csv(p, "regression")
    with pytest.raises(SchemaError):
        ingest_csv(p, "scores")


@pytest.mark.parametrize("make", [
    lambda: gen.gen_iid_linear(20, seed=0, n_binary=2, n_continuous=3),
    lambda: gen.gen_volatility_scores(30, seed=0),
    lambda: gen.gen_sorted_scores(7),
])
def test_export_ingest_round_trip(tmp_path, make):
    s = make()
    path = tmp_path / "d.csv"
    export_csv(s, path, comments=["round trip"])
    back = ingest_csv(path, "regression" if s.is_regression else "scores")
    assert back == s


def test_column_groups(tmp_path):
    s = gen.gen_iid_linear(30, seed=0, n_binary=2, n_continuous=1)
    path = tmp_path / "d.csv"
    export_csv(s, path)
    back = ingest_csv(path, "regression")
    groups, member = column_groups(back, ["x_1"])
    assert groups.names == ["x_1=0", "x_1=1"]
    assert (member.sum(axis=1) == 1).all()
    with pytest.raises(SchemaError):
        column_groups(back, ["x_9"])


def _small(kind, **kw):
    base = dict(experiment=kind, trials=2, seed=7)
    sizes = {"iid_marginal": 120, "group_noise": 120, "covariate_shift": 200,
             "time_series": 150, "mod_groups": 150, "sorted_adversarial": 150}
    base["T"] = sizes[kind]
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.mark.parametrize("kind", ["iid_marginal", "group_noise", "covariate_shift",
                                  "time_series", "mod_groups", "sorted_adversarial"])
def test_every_kind_runs_and_methods_share_data(kind):
    cfg = _small(kind).resolve()
    names, runs = run_trial(cfg, 0)
    assert set(runs) == set(cfg.methods)
    scores = {m: r.transcript.scores for m, r in runs.items()
              if m in ("mvp", "aci")}
    if kind in ("time_series", "mod_groups", "sorted_adversarial"):
        # ACI drops its burn-in rounds; after that both see the same scores
        off = cfg.offset
        assert np.array_equal(scores["mvp"][off:], scores["aci"])
    for run in runs.values():
        q = run.transcript.q
        assert ((0 <= q) & (q <= 1)).all()


def test_warm_start_rounds_are_excluded():
    cfg = _small("covariate_shift", T=400).resolve()
    names, runs = run_trial(cfg, 0)
    mvp = runs["mvp"]
    n_cal = 400 // 4
    eval_rounds = (400 - 2 * n_cal) // 2
    assert mvp.warm_rounds == n_cal
    assert len(mvp.transcript) == eval_rounds == mvp.report.rounds
    assert len(runs["weighted_split"].transcript) == eval_rounds
    # the MVP transcript continues numbering after the warm-start rounds
    assert mvp.transcript[0].t == n_cal + 1


def test_trial_independence_and_byte_identical_outputs(tmp_path):
    cfg = _small("group_noise", out_dir=str(tmp_path / "a"))
    a = run_experiment(cfg)
    b = run_experiment(replace(cfg, out_dir=str(tmp_path / "b")))
    files_a = sorted(p.relative_to(a.out_path) for p in a.out_path.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b.out_path) for p in b.out_path.rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 5
    for rel in files_a:
        assert (a.out_path / rel).read_bytes() == (b.out_path / rel).read_bytes()
    # running trial 1 alone, before trial 0, reproduces it exactly
    _, solo = run_trial(cfg, 1)
    assert solo["mvp"].transcript == a.trials[1]["mvp"].transcript
    head = (a.out_path / "summary.csv").read_text().splitlines()
    assert head[0].startswith("# config: experiment=group_noise")
    assert head[2] == "method,metric,median,q25,q75,mean,std"


def test_parallel_workers_match_serial(tmp_path):
    cfg = _small("sorted_adversarial", trials=2)
    serial = run_experiment(cfg, write=False)
    par = run_experiment(replace(cfg, workers=2), write=False)
    for k in range(2):
        for m in serial.config.methods:
            assert serial.trials[k][m].transcript == par.trials[k][m].transcript


def test_rejects_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DomainError, match="file"):
        run_experiment(_small("sorted_adversarial", trials=1, out_dir=str(blocker)))


def test_cli_gen_run_report(tmp_path, capsys):
    data = tmp_path / "sorted.csv"
    assert main(["gen", "sorted", "--T", "300", "-o", str(data)]) == 0
    out = tmp_path / "out"
    assert main(["run", "--experiment", "csv", "--data", str(data), "--methods", "mvp,aci",
                 "--out-dir", str(out), "--no-rescale"]) == 0
    text = capsys.readouterr().out
    assert "mvp" in text and "aci" in text
    tr = out / "csv" / "trial_000" / "mvp_transcript.csv"
    assert tr.exists()
    rep = tmp_path / "rep.csv"
    assert main(["report", str(tr), "--out", str(rep)]) == 0
    assert rep.read_text().splitlines()[0].startswith("# config:")
    assert main(["run", "--experiment", "iid_marginal", "--trials", "0"]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_config_file_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("experiment = sorted_adversarial\nT = 200\ntrials = 1\ndelta = 0.2\n")
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--delta", "0.1", "--out-dir", str(out)]) == 0
    summary = (out / "sorted_adversarial" / "summary.csv").read_text()
    assert "delta=0.1;" in summary.splitlines()[0]
