import json

import numpy as np
import pytest

from votetrans import io
from votetrans.estimation import FitOptions, fit
from votetrans.simulation import _rng, scenario, simulate

CONFIG = {
    "rows": ["A", "B", "abstain"],
    "columns": ["P", "Q", "none"],
    "covariates": [{"name": "shareA", "share_of": "A"},
                   {"name": "young", "numerator": ["age18"], "denominator": ["pop"]}],
    "effects": [["A", "P", "shareA"], {"row": "abstain", "column": "Q", "covariate": "young"}],
}


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def _sample_csv(tmp_path, k=12, seed=0):
    rng = np.random.default_rng(seed)
    lines = ["station,A,B,abstain,P,Q,none,age18,pop"]
    for s in range(k):
        n = rng.integers(50, 300, size=3)
        y = rng.multinomial(n.sum(), [0.4, 0.3, 0.3])
        lines.append(",".join(map(str, [f"S{s}", *n, *y, rng.integers(10, 50), 500])))
    return _write(tmp_path / "data.csv", lines)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = io.config_from_dict(CONFIG)
        io.save_config(tmp_path / "m.yaml", cfg)
        assert io.load_config(tmp_path / "m.yaml") == cfg
        assert cfg.design().entries == ((0, 0, 0), (2, 1, 1))

    def test_reference_column_effect(self):
        raw = dict(CONFIG, effects=[["A", "none", "shareA"]])
        with pytest.raises(io.ConfigError, match="reference"):
            io.config_from_dict(raw)

    def test_second_election_covariate(self):
        raw = dict(CONFIG, covariates=[{"name": "sp", "share_of": "P"}], effects=[])
        with pytest.raises(io.ConfigError, match="second-election"):
            io.config_from_dict(raw)

    @pytest.mark.parametrize("change", [{"bogus": 1}, {"rows": ["A"], "columns": ["P"]},
                                        {"effects": [["A", "P", "missing"]]}])
    def test_invalid(self, change):
        with pytest.raises(io.ConfigError):
            io.config_from_dict(dict(CONFIG, **change))

    def test_missing_key(self):
        with pytest.raises(io.ConfigError, match="missing"):
            io.config_from_dict({"rows": ["A"]})


class TestDataset:
    def test_load(self, tmp_path):
        cfg = io.config_from_dict(CONFIG)
        records, dims = io.load_dataset(_sample_csv(tmp_path), cfg)
        assert (dims.r, dims.c, dims.k) == (3, 3, 12)
        v = np.array([r.v for r in records])
        np.testing.assert_allclose(v.mean(axis=0), 0, atol=1e-12)

    def test_unbalanced_row_is_reported(self, tmp_path):
        path = _sample_csv(tmp_path)
        lines = path.read_text().splitlines()
        parts = lines[7].split(",")
        parts[4] = str(int(parts[4]) + 1)
        lines[7] = ",".join(parts)
        _write(path, lines)
        cfg = io.config_from_dict(CONFIG)
        with pytest.raises(io.DatasetError, match=r"row 7 .*--allow-unbalanced"):
            io.load_dataset(path, cfg)
        records, _ = io.load_dataset(path, cfg, allow_unbalanced=True)
        assert not records[6].balanced
        records, _ = io.load_dataset(path, cfg, exclude=["S6"])
        assert len(records) == 11 and "S6" not in [r.station_id for r in records]

    def test_exclusion_before_centering(self, tmp_path):
        cfg = io.config_from_dict(CONFIG)
        records, _ = io.load_dataset(_sample_csv(tmp_path), cfg, exclude=["S0", "S1"])
        np.testing.assert_allclose(np.mean([r.v for r in records], axis=0), 0, atol=1e-12)

    @pytest.mark.parametrize("bad,match", [("x", "not a number"), ("-3", "negative"), ("2.5", "non-integer")])
    def test_malformed_counts(self, tmp_path, bad, match):
        path = _sample_csv(tmp_path)
        lines = path.read_text().splitlines()
        parts = lines[3].split(",")
        parts[1] = bad
        lines[3] = ",".join(parts)
        _write(path, lines)
        with pytest.raises(io.DatasetError, match=f"row 3.*{match}|{match}"):
            io.load_dataset(path, io.config_from_dict(CONFIG), allow_unbalanced=True)

    def test_unknown_column(self, tmp_path):
        raw = dict(CONFIG, rows=["A", "B", "C"])
        with pytest.raises(io.DatasetError, match="unknown columns"):
            io.load_dataset(_sample_csv(tmp_path), io.config_from_dict(dict(raw, effects=[], covariates=[])))

    def test_short_row(self, tmp_path):
        path = _sample_csv(tmp_path)
        _write(path, path.read_text().splitlines() + ["S99,1,2"])
        with pytest.raises(io.DatasetError, match="fields"):
            io.load_dataset(path, io.config_from_dict(CONFIG))

    def test_write_and_reload(self, tmp_path):
        cfg = scenario("milan", k=1159, seed=3)
        ds, _ = simulate(cfg, _rng(3))
        rows, cols = ("M", "P", "NV"), ("M2", "P2", "NV2")
        names = [f"V{m + 1}" for m in range(5)]
        io.write_dataset(tmp_path / "milan.csv", ds.records(), rows, cols, names)
        mc = io.ModelConfig(rows=rows, columns=cols,
                            covariates=tuple(io.CovariateDef(n, column=n, transform="raw") for n in names),
                            effects=tuple((rows[i], cols[j], names[m]) for i, j, m in cfg.design.entries))
        records, dims = io.load_dataset(tmp_path / "milan.csv", mc)
        assert dims.k == 1159
        np.testing.assert_array_equal(np.array([r.v for r in records]), ds.v)
        res = fit(records, mc.design(), FitOptions(C=cfg.C))
        assert res.converged


def test_fit_result_round_trip(tmp_path):
    cfg = scenario("discordant", k=60)
    ds, _ = simulate(cfg, _rng(1))
    res = fit(ds, cfg.design, FitOptions(C=cfg.C), shared_tau=True)
    io.save_fit_result(tmp_path / "r.json", res)
    back = io.load_fit_result(tmp_path / "r.json")
    assert np.array_equal(back.params.pack(), res.params.pack())
    assert np.array_equal(back.covariance, res.covariance)
    assert back.loglik == res.loglik
    json.loads((tmp_path / "r.json").read_text())


def test_build_covariate():
    x = io.build_covariate([0.0, 0.5, 1.0])
    assert np.all(np.isfinite(x)) and abs(x.mean()) < 1e-12
    np.testing.assert_array_equal(io.build_covariate([0.2, 0.4], "raw"), [0.2, 0.4])
    with pytest.raises(io.DatasetError):
        io.build_covariate([1.2])
