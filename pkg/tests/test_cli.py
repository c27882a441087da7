"""Checkpoint format, run configs, CLI subcommands, exit codes."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from hybridkit import tensor as T
from hybridkit.checkpoint import (MAGIC, CheckpointError, load_model,
                                  load_tensors, save_model, save_tensors)
from hybridkit.cli import main
from hybridkit.model import desk_config, forward, init_model
from hybridkit.positional import RopeParams
from hybridkit.runconfig import RunConfig, load_run_config
from hybridkit.tensor import ConfigError, Rng


TINY_MODEL = {"arch": "transformer", "L": 2, "d": 16, "d_h": 4, "n_h": 4,
              "n_kv_heads": 2, "ffn_width": 24, "vocab": 512,
              "rope_theta": 1000.0}


def write_cfg(tmp_path, train=None, model=None, halo=None) -> str:
    doc = {"model": dict(TINY_MODEL)}
    doc["train"] = {"steps": 4, "batch_size": 2, "context_len": 64,
                    "warmup_steps": 1, **(train or {})}
    if model:
        doc["model"].update(model)
    if halo is not None:
        doc["halo"] = halo
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


# --------------------------------------------------------------------------
# checkpoint container

def test_checkpoint_roundtrip_bit_exact_both_precisions(tmp_path):
    for mode in ("extended", "standard"):
        T.set_precision(mode)
        cfg = desk_config(L=2, I_attn=(0,), d=16, d_h=4, n_h=4, n_kv_heads=2,
                          ffn_width=24, vocab=64,
                          rope=RopeParams(theta=100.0, head_dim=4))
        model = init_model(cfg, seed=1)
        path = tmp_path / f"m_{mode}.ckpt"
        save_model(path, model)
        back = load_model(path)
        for (na, ta), (nb, tb) in zip(model.named_parameters(),
                                      back.named_parameters()):
            assert na == nb
            assert ta.data.dtype == tb.data.dtype
            np.testing.assert_array_equal(ta.data, tb.data)
        assert back.cfg == cfg


def test_checkpoint_double_roundtrip_stable(tmp_path):
    cfg = desk_config(L=1, I_attn=(0,), d=16, d_h=4, n_h=4, n_kv_heads=2,
                      ffn_width=24, vocab=64,
                      rope=RopeParams(theta=100.0, head_dim=4))
    model = init_model(cfg, seed=2)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_model(p1, model)
    save_model(p2, load_model(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(path)


def test_checkpoint_corrupted_header_len(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_tensors(path, {"kind": "x"}, {"a": np.zeros(3, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    struct.pack_into("<Q", raw, len(MAGIC), 2**40)  # absurd header length
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="header"):
        load_tensors(path)


def test_checkpoint_offsets_cover_payload(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"kind": "x"},
                 {"a": np.arange(4, dtype=np.float32),
                  "b": np.arange(6, dtype=np.float64).reshape(2, 3)})
    cfg, tensors = load_tensors(path)
    assert tensors["a"].dtype == np.float32
    assert tensors["b"].dtype == np.float64
    np.testing.assert_array_equal(tensors["b"], np.arange(6).reshape(2, 3))
    # appending junk makes the payload no longer exactly covered
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_tensors(path)


# --------------------------------------------------------------------------
# run config

def test_runconfig_unknown_key_names_it(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"stepz": 3}}))
    with pytest.raises(ConfigError, match="train.stepz"):
        load_run_config(p)


def test_runconfig_unknown_section(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"nonsense": {}}))
    with pytest.raises(ConfigError, match="nonsense"):
        load_run_config(p)


def test_runconfig_arch_defaults():
    rc = RunConfig({"model": {"arch": "transformer", "L": 4}})
    assert rc.model.I_attn == (0, 1, 2, 3)
    assert rc.model.pe_attention == "rope" and not rc.model.attn_gate
    rc = RunConfig({"model": {"arch": "hypenet", "L": 8}})
    assert rc.model.I_attn == (0, 4)
    assert rc.model.pe_attention == "nope" and rc.model.attn_gate


def test_runconfig_seed_override():
    rc = RunConfig({"train": {"seed": 5}}, seed_override=9)
    assert rc.train.seed == 9 and rc.halo.stage1.seed == 9


# --------------------------------------------------------------------------
# CLI: train

def test_cli_train_smoke_and_report(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "m.ckpt"
    assert main(["train", cfg, str(out)]) == 0
    assert out.exists()
    report = [json.loads(l) for l in
              Path(str(out) + ".report.jsonl").read_text().splitlines()]
    steps = [r for r in report if "loss" in r]
    assert len(steps) == 4
    assert all(np.isfinite(r["loss"]) for r in steps)


def test_cli_dry_run_trains_nothing(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "m.ckpt"
    assert main(["--dry-run", "train", cfg, str(out)]) == 0
    assert not out.exists()
    doc = json.loads(capsys.readouterr().out)
    assert doc["parameters"] > 0
    assert doc["train"]["steps"] == 4


def test_cli_train_determinism_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert main(["--precision", "extended", "--seed", "3", "train", cfg, str(a)]) == 0
    assert main(["--precision", "extended", "--seed", "3", "train", cfg, str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_config_error_exit_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"bogus_key": 1}}))
    assert main(["train", str(p), str(tmp_path / "x.ckpt")]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_cli_missing_config_exit_2(tmp_path):
    assert main(["train", str(tmp_path / "absent.json"), "x.ckpt"]) == 2


def test_cli_bad_checkpoint_exit_2(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage!")
    assert main(["inspect", str(bad)]) == 2


# --------------------------------------------------------------------------
# CLI: eval and bench

@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ck")
    cfg = write_cfg(tmp)
    out = tmp / "model.ckpt"
    assert main(["--seed", "1", "train", cfg, str(out)]) == 0
    return out


def test_cli_eval_matches_library_calls(tiny_ckpt, tmp_path):
    out = tmp_path / "sweep.tsv"
    assert main(["eval", str(tiny_ckpt), "--task", "niah", "--lengths", "64,96",
                 "--samples", "8", "--no-scaling", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "length\tmetric\tvalue\tn_samples"
    assert len(lines) == 3

    from hybridkit.evals import length_sweep
    T.set_precision("standard")
    model = load_model(tiny_ckpt)
    ref = length_sweep(model, [64, 96], scale_base=None, n_samples=8, seed=0)
    for line, r in zip(lines[1:], ref):
        cols = line.split("\t")
        assert int(cols[0]) == r.context_len
        assert float(cols[2]) == pytest.approx(r.value, abs=0)


def test_cli_eval_scaling_variants_distinct_files(tiny_ckpt, tmp_path):
    a, b = tmp_path / "fit.tsv", tmp_path / "none.tsv"
    assert main(["eval", str(tiny_ckpt), "--lengths", "64", "--samples", "4",
                 "--scale-base", "100", "--out", str(a)]) == 0
    assert main(["eval", str(tiny_ckpt), "--lengths", "64", "--samples", "4",
                 "--no-scaling", "--out", str(b)]) == 0
    assert a.exists() and b.exists() and a != b


def test_cli_eval_rejects_conflicting_scaling(tiny_ckpt):
    with pytest.raises(SystemExit):
        main(["eval", str(tiny_ckpt), "--no-scaling", "--scale-base", "5"])


def test_cli_bench_decode_and_prefill(tiny_ckpt, capsys):
    assert main(["bench", str(tiny_ckpt), "--mode", "decode",
                 "--lengths", "32,64", "--reps", "2", "--decode-tokens", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("length\tmode\tseconds_per_token")
    rows = [l.split("\t") for l in out[1:]]
    assert [r[0] for r in rows] == ["32", "64"]
    kv32, kv64 = int(rows[0][3]), int(rows[1][3])
    # decode appends a few tokens beyond the prompt; cache grows with length
    assert kv64 > kv32 > 0

    assert main(["bench", str(tiny_ckpt), "--mode", "prefill",
                 "--lengths", "32", "--reps", "2"]) == 0


def test_cli_inspect_param_count_closed_form(tiny_ckpt, capsys):
    assert main(["inspect", str(tiny_ckpt)]) == 0
    out = capsys.readouterr().out
    count = int([l for l in out.splitlines() if l.startswith("parameters:")][0]
                .split(":")[1])
    m = TINY_MODEL
    d, dh, nh, nkv, f, L, v = (m["d"], m["d_h"], m["n_h"], m["n_kv_heads"],
                               m["ffn_width"], m["L"], m["vocab"])
    per_attn = d * nh * dh * 2 + d * nkv * dh * 2 + nh * dh + nkv * dh  # proj + qk gains
    per_layer = per_attn + 2 * d + 3 * d * f
    assert count == v * d + L * per_layer + d


# --------------------------------------------------------------------------
# CLI: halo pipeline with stage reruns

def test_cli_halo_end_to_end_and_stage_rerun(tmp_path):
    cfg = write_cfg(
        tmp_path,
        halo={"stage1": {"steps": 3, "batch_size": 2, "context_len": 64,
                         "lr_max": 1e-3, "warmup_steps": 1},
              "stage2": {"steps": 3, "batch_size": 2, "context_len": 64,
                         "lr_max": 1e-4, "warmup_steps": 1},
              "stage3": {"steps": 2, "batch_size": 1, "context_len": 128,
                         "lr_max": 1e-5, "schedule": "constant",
                         "warmup_steps": 1},
              "rc_samples": 4},
    )
    teacher_path = tmp_path / "teacher.ckpt"
    assert main(["--seed", "2", "train", cfg, str(teacher_path)]) == 0
    out = tmp_path / "halo"
    assert main(["--seed", "2", "halo", str(teacher_path), cfg, str(out)]) == 0
    for name in ("scores.tsv", "selection.json", "hybrid_init.ckpt",
                 "hybrid_stage2.ckpt", "final.ckpt"):
        assert (out / name).exists(), name
    sel = json.loads((out / "selection.json").read_text())
    assert len(sel["I_attn"]) == 1  # floor(2/4) -> min 1

    # stage-2 rerun from persisted artifacts is bit-reproducible
    first = (out / "hybrid_stage2.ckpt").read_bytes()
    assert main(["--seed", "2", "halo", str(teacher_path), cfg, str(out),
                 "--stage", "2"]) == 0
    assert (out / "hybrid_stage2.ckpt").read_bytes() == first


def test_cli_select_layers_missing_artifact_names_layer(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    teacher_path = tmp_path / "t.ckpt"
    assert main(["train", cfg, str(teacher_path)]) == 0
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["select-layers", str(teacher_path), str(empty)]) == 2
    assert "layer 0" in capsys.readouterr().err
