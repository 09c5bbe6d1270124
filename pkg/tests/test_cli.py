"""Config parsing, experiment runs, output files, and exit codes."""

import json
import textwrap

import numpy as np
import pytest

from spt_lab import cli
from spt_lab.errors import ConfigError


def _write(tmp_path, text, name="exp.ini"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return str(p)


def _simulate_cfg(tmp_path, out_dir, extra_mc="", extra_out="", n_paths=20):
    return _write(tmp_path, f"""\
        [experiment]
        name = simulate

        [model]
        kind = constant
        sigma_diag = 0.2, 0.3
        b = 0.05, 0.0
        x0 = 1.0, 2.0

        [grid]
        horizon = 1.0
        n_steps = 50

        [mc]
        n_paths = {n_paths}
        master_seed = 3
        {extra_mc}

        [output]
        directory = {out_dir}
        {extra_out}
        """)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def test_parse_minimal_config_defaults(tmp_path):
    cfg = cli.parse_config(_simulate_cfg(tmp_path, tmp_path / "out"))
    assert cfg.name == "simulate"
    assert cfg.model.kind == "constant"
    assert cfg.model.n == 2
    assert cfg.grid.n_steps == 50
    assert cfg.n_paths == 20
    assert cfg.master_seed == 3
    assert cfg.workers == 1
    assert cfg.batch_size is None
    assert cfg.per_path is True      # small runs record per-path rows by default
    assert cfg.series is False
    assert cfg.write_json is True
    assert cfg.overrides == {}


def test_parse_missing_file(tmp_path):
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(str(tmp_path / "absent.ini"))
    assert "not found" in exc.value.messages[0]


def test_parse_collects_every_error(tmp_path):
    path = _write(tmp_path, """\
        [experiment]
        name = simulate

        [model]
        kind = diverse
        sigma_scale = 1.0
        delta = 0.3
        x0 = 10.0, 1.0, 1.0

        [grid]
        horizon = 1.0
        n_steps = 10

        [mc]
        n_paths = -5
        master_seed = 1
        """)
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(path)
    text = "; ".join(exc.value.messages)
    assert len(exc.value.messages) >= 2
    assert "barrier" in text          # initial top weight already too large
    assert "mc.n_paths" in text


def test_parse_rejects_unknown_experiment_and_keys(tmp_path):
    path = _write(tmp_path, """\
        [experiment]
        name = levitate

        [mc]
        n_paths = 10
        master_seed = 0
        """)
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(path)
    assert any("experiment.name" in m for m in exc.value.messages)

    stray = _simulate_cfg(tmp_path, tmp_path / "o", extra_mc="typo = 1")
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(stray)
    assert any("mc.typo" in m for m in exc.value.messages)


def test_parse_steps_per_unit_restricted_to_call_decay(tmp_path):
    path = _write(tmp_path, """\
        [experiment]
        name = simulate

        [model]
        kind = constant
        sigma_diag = 0.2
        b = 0.0
        x0 = 1.0

        [grid]
        horizon = 1.0
        n_steps = 10
        steps_per_unit = 5

        [mc]
        n_paths = 4
        master_seed = 0
        """)
    with pytest.raises(ConfigError) as exc:
        cli.parse_config(path)
    assert any("steps_per_unit" in m for m in exc.value.messages)


def test_flag_overrides_beat_file_values(tmp_path):
    cfg = cli.parse_config(_simulate_cfg(tmp_path, tmp_path / "a"),
                           paths=7, seed=99, steps=25, out=str(tmp_path / "b"))
    assert cfg.n_paths == 7
    assert cfg.master_seed == 99
    assert cfg.grid.n_steps == 25
    assert cfg.out_dir.endswith("b")
    assert cfg.overrides == {
        "mc.n_paths": "7", "mc.master_seed": "99",
        "grid.n_steps": "25", "output.directory": str(tmp_path / "b"),
    }


def test_per_path_gating(tmp_path):
    big = _simulate_cfg(tmp_path, tmp_path / "o1", n_paths=20_000)
    assert cli.parse_config(big).per_path is False
    forced = _simulate_cfg(tmp_path, tmp_path / "o2", n_paths=20_000,
                           extra_out="per_path = true")
    assert cli.parse_config(forced).per_path is True


# ---------------------------------------------------------------------------
# running experiments end to end
# ---------------------------------------------------------------------------

def test_run_simulate_writes_outputs(tmp_path):
    out = tmp_path / "run1"
    cfg = _simulate_cfg(tmp_path, out, extra_out="series = true")
    assert cli.main(["run", cfg]) == 0
    for fname in ("metrics.csv", "per_path.csv", "series.csv",
                  "summary.txt", "summary.json"):
        assert (out / fname).is_file(), fname
    doc = json.loads((out / "summary.json").read_text())
    assert doc["provenance"]["master_seed"] == 3
    assert doc["config"]["experiment"]["name"] == "simulate"
    # numeric cells carry full precision and parse back to floats
    rows = (out / "per_path.csv").read_text().strip().splitlines()
    assert rows[0].startswith("path_id,")
    assert len(rows) == 21
    float(rows[1].split(",")[1])


def test_reruns_and_worker_counts_are_byte_identical(tmp_path):
    outs = []
    for i, extra in enumerate(("", "", "workers = 4")):
        out = tmp_path / f"d{i}"
        cfg = _simulate_cfg(tmp_path, out, extra_mc=extra)
        assert cli.main(["run", cfg]) == 0
        outs.append(out)
    for fname in ("metrics.csv", "per_path.csv"):
        blobs = [(o / fname).read_bytes() for o in outs]
        assert blobs[0] == blobs[1] == blobs[2], fname


def test_exit_codes_for_bad_invocations(tmp_path):
    assert cli.main(["run", str(tmp_path / "ghost.ini")]) == 2
    bad = _write(tmp_path, "[experiment]\nname = simulate\n")
    assert cli.main(["run", bad]) == 2
    with pytest.raises(SystemExit):
        cli.main([])


def test_failed_comparison_exits_four(tmp_path):
    """On a coarse uniform grid the early-lead claim genuinely fails."""
    out = tmp_path / "coarse"
    cfg = _write(tmp_path, f"""\
        [experiment]
        name = instantaneous-dominance

        [model]
        kind = dominance
        alpha = 0.25

        [grid]
        horizon = 1.0
        n_steps = 16
        geometric = false

        [mc]
        n_paths = 200
        master_seed = 11

        [output]
        directory = {out}
        """)
    assert cli.main(["run", cfg]) == 4
    summary = (out / "summary.txt").read_text()
    assert "FAIL" in summary


def test_arbitrage_per_path_schema(tmp_path):
    out = tmp_path / "a45"
    cfg = _write(tmp_path, f"""\
        [experiment]
        name = arbitrage-45
        p = 0.5

        [model]
        kind = diverse
        sigma_scale = 1.0
        delta = 0.3
        x0 = 1.0, 1.0, 1.0

        [grid]
        horizon = 2.0
        n_steps = 200

        [mc]
        n_paths = 60
        master_seed = 11

        [output]
        directory = {out}
        """)
    assert cli.main(["run", cfg]) == 0
    header = (out / "per_path.csv").read_text().splitlines()[0]
    assert header == "path_id,terminal_log_ratio,a5_slack,delta_avg,delta_max"


def test_call_decay_table_schema(tmp_path):
    out = tmp_path / "decay"
    cfg = _write(tmp_path, f"""\
        [experiment]
        name = call-decay
        strike = 1.0
        horizons = 1.0, 2.0

        [model]
        kind = diverse
        sigma_scale = 0.25
        delta = 0.3
        x0 = 1.0, 1.0
        r = 0.03

        [grid]
        steps_per_unit = 20

        [mc]
        n_paths = 200
        master_seed = 7

        [output]
        directory = {out}
        """)
    rc = cli.main(["run", cfg])
    assert rc in (0, 4)
    table = (out / "table.csv").read_text().splitlines()
    assert table[0] == "T,h_hat,stderr,envelope"
    assert len(table) == 3
    stock = (out / "stock.csv").read_text().splitlines()
    assert stock[0] == "T,deflated_stock,stderr,envelope"


def test_call_decay_steps_override_goes_to_steps_per_unit(tmp_path):
    cfg = _write(tmp_path, f"""\
        [experiment]
        name = call-decay
        strike = 1.0
        horizons = 1.0

        [model]
        kind = diverse
        sigma_scale = 0.25
        delta = 0.3
        x0 = 1.0, 1.0
        r = 0.03

        [grid]
        steps_per_unit = 20

        [mc]
        n_paths = 10
        master_seed = 7

        [output]
        directory = {tmp_path / "x"}
        """, name="decay.ini")
    parsed = cli.parse_config(cfg, steps=5)
    assert parsed.extras["steps_per_unit"] == 5
