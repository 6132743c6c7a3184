import json

import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from homoglab.config import DEFAULTS, SUITES, RunConfig, load_config
from homoglab.fluctuations import EnsembleConfig
from homoglab.gaussian_field import ConfigError
from homoglab.io import (ChecksumError, FieldCache, manifest, read_array, read_csv, sha256_file,
                         write_array, write_csv, write_json)


# ---------------------------------------------------------------- configuration

def test_defaults_load_and_validate():
    cfg = load_config()
    assert cfg.data == DEFAULTS and cfg.suites == list(SUITES)
    assert cfg.seeds() == list(range(100)) and cfg.seeds("calibration_seeds")[0] == 100000
    assert [cfg.ensemble_config(e).grid.N for e in cfg.eps_list] == [16, 32, 64]


def test_partial_document_merges_with_defaults():
    cfg = load_config(text="grid:\n  eps: [0.25]\nthreads: 3\n")
    assert cfg.eps_list == [0.25] and cfg.threads == 3 and cfg.h == 0.5


def test_unknown_key_reports_line_number():
    text = "version: 1\ngrid:\n  d: 2\n  spacing: 0.5\n"
    with pytest.raises(ConfigError, match=r"grid\.spacing \(line 4\)"):
        load_config(text=text)


@pytest.mark.parametrize("text", [
    "version: 2\n",
    "grid: {d: 4}\n",
    "grid: {eps: [0.3]}\n",            # N = 1/(eps h) not an integer
    "grid: {h: two}\n",
    "suites: [identities, bogus]\n",
    "threads: 0\n",
    "ensemble: {coefficient: {kind: nope}}\n",
    "ensemble: {coefficient: {kind: constant, colour: red}}\n",
    "grid: [1, 2]\n",
    "grid: {d: 2\n",
])
def test_invalid_documents_raise_config_error(text):
    with pytest.raises(ConfigError):
        load_config(text=text)


def test_overlapping_seed_ranges_are_rejected():
    with pytest.raises(ConfigError, match="overlap"):
        load_config(text="ensemble:\n  calibration_seeds: {start: 50, count: 10}\n")
    # normality seeds extend the evaluation block
    with pytest.raises(ConfigError, match="overlap"):
        load_config(text="ensemble:\n  calibration_seeds: {start: 150, count: 10}\n")


def _shuffle(obj, rnd):
    if isinstance(obj, dict):
        keys = list(obj)
        rnd.shuffle(keys)
        return {k: _shuffle(obj[k], rnd) for k in keys}
    return obj


@given(st.randoms(use_true_random=False))
def test_hash_independent_of_key_order(rnd):
    text = yaml.safe_dump(_shuffle(DEFAULTS, rnd), sort_keys=False)
    assert load_config(text=text).digest == RunConfig().digest


def test_hash_changes_with_content():
    assert load_config(text="threads: 2\n").digest != RunConfig().digest


def test_overrides_and_yaml_round_trip(tmp_path):
    cfg = RunConfig().with_overrides(seeds=(5, 10), threads=2, tol=1e-9, output="x")
    assert cfg.seeds() == list(range(5, 15)) and cfg.tol == 1e-9 and cfg.output == "x"
    p = tmp_path / "c.yaml"
    p.write_text(cfg.to_yaml())
    back = load_config(p)
    assert back.digest == cfg.digest and back.source == str(p)


def test_ensemble_config_carries_run_settings():
    cfg = load_config(text="ensemble:\n  kernel: {radius: 1.5}\ntolerances: {solver: 1.0e-9}\n")
    ec = cfg.ensemble_config(0.125, kind="nonsymmetric-with-skew-part")
    assert isinstance(ec, EnsembleConfig)
    assert ec.kernel_radius == 1.5 and ec.tol == 1e-9
    assert ec.coefficient.kind == "nonsymmetric-with-skew-part"


# ---------------------------------------------------------------- arrays and tables

def test_array_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 4, 5))
    side = write_array(tmp_path / "a.f64", a, {"seed": 3})
    b, meta = read_array(tmp_path / "a.f64")
    assert b.tobytes() == a.tobytes() and meta == {"seed": 3}
    assert json.loads(side.read_text())["shape"] == [3, 4, 5]


def test_corrupted_array_raises(tmp_path):
    p = tmp_path / "a.f64"
    write_array(p, np.arange(10.0))
    blob = bytearray(p.read_bytes())
    blob[3] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError, match="checksum mismatch"):
        read_array(p)


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
def test_csv_floats_round_trip_exactly(tmp_path_factory, values):
    p = tmp_path_factory.mktemp("csv") / "t.csv"
    write_csv(p, [{"k": i, "v": v} for i, v in enumerate(values)])
    rows = read_csv(p)
    assert [float(r["v"]) for r in rows] == values
    assert list(rows[0]) == ["k", "v"]


def test_csv_respects_explicit_header(tmp_path):
    p = write_csv(tmp_path / "t.csv", [{"b": 1, "a": 2.5}], header=["a", "b"])
    assert p.read_text().splitlines()[0] == "a,b"


def test_json_serialises_numpy(tmp_path):
    p = write_json(tmp_path / "s.json", {"x": np.float64(1.5), "y": np.arange(3), "p": tmp_path})
    d = json.loads(p.read_text())
    assert d["x"] == 1.5 and d["y"] == [0, 1, 2] and d["p"] == str(tmp_path)
    with pytest.raises(TypeError):
        write_json(tmp_path / "bad.json", {"x": object()})


def test_manifest_hashes_relative_paths(tmp_path):
    p = write_json(tmp_path / "sub" / "a.json", {"a": 1})
    assert manifest([p], tmp_path) == {"sub/a.json": sha256_file(p)}


# ---------------------------------------------------------------- field cache

CFG = EnsembleConfig(d=2, eps=1 / 8, h=0.5)


def test_field_cache_returns_same_field_and_reuses_file(tmp_path):
    cache = FieldCache(tmp_path)
    first = cache.field(CFG, 4)
    path = cache.path(CFG, 4)
    assert path.exists()
    again = cache.field(CFG, 4)
    assert again.values.tobytes() == first.values.tobytes()
    assert cache(CFG, 4).a.shape == (2, 2) + CFG.grid.shape


def test_field_cache_detects_corruption(tmp_path):
    cache = FieldCache(tmp_path)
    cache.field(CFG, 1)
    p = cache.path(CFG, 1)
    p.write_bytes(b"\0" * len(p.read_bytes()))
    with pytest.raises(ChecksumError):
        cache.field(CFG, 1)


def test_field_cache_from_env(monkeypatch, tmp_path):
    monkeypatch.delenv("HOMOGLAB_CACHE", raising=False)
    assert FieldCache.from_env() is None
    monkeypatch.setenv("HOMOGLAB_CACHE", str(tmp_path))
    assert FieldCache.from_env().root == tmp_path


def test_field_cache_keys_differ_by_kernel(tmp_path):
    cache = FieldCache(tmp_path)
    other = EnsembleConfig(d=2, eps=1 / 8, h=0.5, kernel_radius=1.5)
    assert cache.path(CFG, 0) != cache.path(other, 0)
