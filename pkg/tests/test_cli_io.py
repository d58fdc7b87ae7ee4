import json

import numpy as np
import pytest
from click.testing import CliRunner

from oneworld.acceptance import DETERMINISM_CONFIGS
from oneworld.cli_io import (
    MANIFEST, exit_code_for, main, parse_config, parse_config_text, resolve_threads, run_scenario,
    validate_config,
)
from oneworld.errors import (
    BudgetExceededError, ConfigError, InstabilityError, NeighborCollapseError, PacketEscapesGridError,
    ResourceCapError, VerificationError,
)

MINIMAL = 'scenario = "grid"\n'

SMALL_SLIT = """
scenario = "double_slit"
seed = 3
[time]
dt = 0.01
n_steps = 400
save_every = 2
[double_slit]
n_points = [128, 128]
extent = 20.0
x0 = -8.0
p0 = 4.0
sigma_x = 1.5
sigma_y = 2.0
wall_position = -4.0
slit_centers = [-1.5, 1.5]
slit_widths = [1.0, 1.0]
detector_x = 6.0
absorber_width = 3.0
n_bins = 24
y_range = 15.0
n_paths = 0
"""


def violations(text, scenario=None):
    with pytest.raises(ConfigError) as ei:
        parse_config_text(text, scenario)
    return ei.value.violations


# ---------------------------------------------------------------- validation

def test_minimal_config_defaults():
    cfg = parse_config_text(MINIMAL)
    assert cfg.scenario == "grid" and cfg.hbar == 1.0 and cfg.mass == 1.0
    assert cfg.grid["lo"] == [-20.0] and cfg.grid["n"] == [1024]
    assert cfg.block("solver")["form"] == "complex"
    assert cfg.seed == 0


def test_negative_dt_and_misspelled_table_reported_together():
    v = violations(MINIMAL + "[time]\ndt = -0.1\n[potental]\nkind = 'free'\n")
    assert any(s.startswith("time.dt:") for s in v)
    assert any("potental" in s and "did you mean 'potential'" in s for s in v)


def test_unknown_nested_key():
    v = violations(MINIMAL + "[potential]\nkind = 'harmonic'\nomgea = 1.0\n")
    assert any("potential" in s and "omgea" in s for s in v)


def test_parse_error_keeps_line(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text('scenario = "grid"\n[time\ndt = 1\n')
    with pytest.raises(ConfigError) as ei:
        parse_config(p)
    assert "line 2" in " ".join(ei.value.violations)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "none.toml")


@pytest.mark.parametrize("extra", [
    "[grid]\nn = [1000]\n",
    "[potential]\nkind = 'gaussian_barrier'\nheight = 1.0\n",
    "[potential]\nkind = 'free'\nomega = 2.0\n",
    "[time]\nn_steps = 10\nsave_every = 20\n",
    "[paths]\nn_paths = 5\n",
    "seed = -1\n",
    "seed = 18446744073709551616\n",
])
def test_semantic_and_range_violations(extra):
    assert violations(MINIMAL + extra)


def test_block_scenario_mismatch():
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL, scenario="paths")
    assert violations('scenario = "adf"\n[grid]\nlo = [-5.0, -5.0]\nhi = [5.0, 5.0]\nn = [64, 64]\n')


def test_config_hash_ignores_out_and_threads():
    a = parse_config_text(MINIMAL)
    b = parse_config_text(MINIMAL + 'out = "elsewhere"\nthreads = 4\n')
    c = parse_config_text(MINIMAL + "hbar = 0.5\n")
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_validate_config_dict():
    cfg = validate_config({"scenario": "feynman_kac", "feynman_kac": {"targets": [0.0, 1.0]}})
    assert cfg.block("feynman_kac")["targets"] == [0.0, 1.0]


# ---------------------------------------------------------------- runs

def test_double_slit_without_paths(tmp_path):
    code, manifest = run_scenario(parse_config_text(SMALL_SLIT), tmp_path)
    assert code == 0
    assert (tmp_path / "spots.csv").read_text().strip().count("\n") == 0
    assert json.loads((tmp_path / "report.json").read_text())["detected"] == 0


@pytest.mark.parametrize("name", sorted(DETERMINISM_CONFIGS))
def test_determinism(name, tmp_path):
    sums = []
    for rep in range(2):
        _, manifest = run_scenario(parse_config_text(DETERMINISM_CONFIGS[name]), tmp_path / str(rep))
        sums.append({f["path"]: f["sha256"] for f in manifest["files"]})
    assert sums[0] == sums[1] and sums[0]


def test_manifest_lists_every_file(tmp_path):
    code, manifest = run_scenario(parse_config_text(DETERMINISM_CONFIGS["grid"]), tmp_path)
    assert code == 0
    on_disk = sorted(p.name for p in tmp_path.iterdir() if p.name != MANIFEST)
    assert [f["path"] for f in manifest["files"]] == on_disk
    assert set(on_disk) >= {"initial.owf", "observables.csv", "final.owf"}
    stored = json.loads((tmp_path / MANIFEST).read_text())
    assert stored == json.loads(json.dumps(manifest))
    # nothing run-dependent such as timestamps
    assert set(stored) == {"scenario", "config_sha256", "seed", "versions", "exit_code", "files"}


def test_seed_changes_paths(tmp_path):
    cfg = parse_config_text(DETERMINISM_CONFIGS["paths"])
    _, a = run_scenario(cfg, tmp_path / "a")
    _, b = run_scenario(cfg, tmp_path / "b", seed=12)
    fa = {f["path"]: f["sha256"] for f in a["files"]}
    fb = {f["path"]: f["sha256"] for f in b["files"]}
    assert fa["paths.csv"] != fb["paths.csv"]
    assert b["seed"] == 12


def test_run_records_runtime_error(tmp_path):
    # a packet pushed off the grid fails at construction: configuration class
    cfg = parse_config_text(MINIMAL + "[initial]\nq0 = [19.0]\ngamma = [0.05]\n")
    code, manifest = run_scenario(cfg, tmp_path)
    assert code == 2 and manifest["error"]["type"] == "PacketEscapesGridError"
    assert (tmp_path / MANIFEST).exists()


@pytest.mark.parametrize("exc,code", [
    (ConfigError("x"), 2), (InstabilityError("x"), 3), (ResourceCapError("x"), 4),
    (BudgetExceededError("x"), 4), (VerificationError("x"), 5), (NeighborCollapseError("x"), 3),
    (np.linalg.LinAlgError("x"), 3), (FloatingPointError("x"), 3), (MemoryError(), 4),
    (PacketEscapesGridError("x"), 2), (KeyError("x"), 2), (RuntimeError("x"), 1),
])
def test_exit_codes(exc, code):
    assert exit_code_for(exc) == code


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("ONEWORLD_THREADS", raising=False)
    cfg = parse_config_text(MINIMAL + "threads = 3\n")
    assert resolve_threads(None) == 1
    assert resolve_threads(None, cfg) == 3
    assert resolve_threads(2, cfg) == 2
    monkeypatch.setenv("ONEWORLD_THREADS", "5")
    assert resolve_threads(None, cfg) == 5
    monkeypatch.setenv("ONEWORLD_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads(None)
    with pytest.raises(ConfigError):
        resolve_threads(0)


# ---------------------------------------------------------------- command line

def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_cli_grid_run(tmp_path):
    r = CliRunner().invoke(main, ["grid", "--config", write(tmp_path, DETERMINISM_CONFIGS["grid"]),
                                  "--out", str(tmp_path / "o")])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "o" / MANIFEST).exists()


def test_cli_reports_all_violations(tmp_path):
    cfg = write(tmp_path, MINIMAL + "[time]\ndt = -0.1\n[potental]\nkind = 'free'\n")
    r = CliRunner().invoke(main, ["grid", "--config", cfg, "--out", str(tmp_path / "o")])
    assert r.exit_code == 2
    assert "time.dt" in r.output and "potental" in r.output


def test_cli_scenario_mismatch(tmp_path):
    r = CliRunner().invoke(main, ["adf", "--config", write(tmp_path, MINIMAL)])
    assert r.exit_code == 2


def test_cli_bad_seed(tmp_path):
    r = CliRunner().invoke(main, ["grid", "--config", write(tmp_path, MINIMAL), "--seed", "-3"])
    assert r.exit_code == 2


def test_cli_bad_thread_env(tmp_path):
    r = CliRunner(env={"ONEWORLD_THREADS": "zero"}).invoke(
        main, ["grid", "--config", write(tmp_path, DETERMINISM_CONFIGS["grid"]), "--out", str(tmp_path / "o")])
    assert r.exit_code == 2


@pytest.mark.parametrize("name,text", [
    ("param_flow", 'scenario = "param_flow"\n[time]\ndt = 0.01\nn_steps = 50\nsave_every = 10\n'
                   '[param_flow]\nfamily = "skewed_gaussian"\nc = 0.3\nu0 = [1.0]\nv0 = [0.0]\nmode = "alternate"\n'),
    ("adf", 'scenario = "adf"\n[potential]\nkind = "harmonic"\nomega = 1.0\n[initial]\nq0 = [1.0]\n'
            '[time]\ndt = 0.01\nn_steps = 100\nsave_every = 50\n'),
    ("feynman_kac", 'scenario = "feynman_kac"\n[potential]\nkind = "harmonic"\nomega = 1.0\n'
                    '[feynman_kac]\nn_samples = 500\nn_steps = 32\ntargets = [0.0, 0.5]\n'),
])
def test_cli_scenarios(name, text, tmp_path):
    out = tmp_path / "o"
    r = CliRunner().invoke(main, [name, "--config", write(tmp_path, text), "--out", str(out)])
    assert r.exit_code == 0, r.output
    manifest = json.loads((out / MANIFEST).read_text())
    assert manifest["exit_code"] == 0 and manifest["files"]


def test_cli_verify_filter_selects_nothing():
    r = CliRunner().invoke(main, ["verify", "--filter", "no-such-criterion"])
    assert r.exit_code == 5


def test_cli_version():
    r = CliRunner().invoke(main, ["--version"])
    assert r.exit_code == 0 and "oneworld" in r.output
