import json
from dataclasses import replace

import jsonschema
import numpy as np
import pytest
import torch

from piecediff import data as D
from piecediff import diffusion as dif
from piecediff import geometry as geo
from piecediff.bench import bench
from piecediff.checkpoint import load_checkpoint, save_checkpoint
from piecediff.cli import main
from piecediff.config import load_config, with_overrides
from piecediff.errors import ConfigError
from piecediff.evaluate import evaluate
from piecediff.metrics import REPORT_SCHEMA
from piecediff.model import AssemblyModel, OraclePredictor
from piecediff.sampler import solve
from piecediff.train import compute_loss, init_state, train_step

SMALL = ["denoiser.hidden=16", "denoiser.layers=1", "denoiser.heads=2", "encoder.dim=16",
         "encoder.conv_channels=4", "schedule.T=20"]


def small_cfg(*extra, task="puzzle2d"):
    return load_config(None, [f"task={task}"] + SMALL + list(extra))


def puzzle(n=2, seed=0, missing=0.0):
    p = D.generate_puzzle(D.synth_image(8 * n, seed), n, missing_fraction=missing, seed=seed)
    return D.shuffle_instance(p, seed)


class GTPredictor:
    """Predictor stand-in that makes ``solve`` skip straight to the ground truth."""

    def __init__(self):
        self.oracle = OraclePredictor()

    def prepare(self, inst, active, seed):
        self.oracle.prepare(inst, active, seed)

    def __call__(self, trans_t, rot_t, t):
        return self.oracle(trans_t, rot_t, t)


# training


def test_train_step_deterministic():
    cfg = small_cfg()
    inst = [puzzle(2, 0), puzzle(3, 1)]
    sched = dif.schedule_new(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    recs = []
    for _ in range(2):
        st = init_state(cfg)
        recs.append([train_step(inst, st.model, st.optimizer, cfg, st.rng, sched, i) for i in range(2)])
    assert recs[0] == recs[1]


def test_train_step_empty_batch():
    cfg = small_cfg()
    st = init_state(cfg)
    sched = dif.schedule_new(20)
    with pytest.raises(ConfigError):
        train_step([], st.model, st.optimizer, cfg, st.rng, sched)


def test_overfit_single_puzzle_loss_decreases():
    # per-step losses are noisy in t, so compare block means over the 200 steps
    cfg = small_cfg("optim.algorithm=adam", "optim.lr=0.003")
    inst = [puzzle(2, 3)]
    sched = dif.schedule_new(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    st = init_state(cfg)
    losses = [train_step(inst, st.model, st.optimizer, cfg, st.rng, sched, i)["loss"] for i in range(200)]
    blocks = np.array(losses).reshape(4, 50).mean(1)
    assert np.all(np.diff(blocks) < 0), blocks


def test_masked_pieces_contribute_nothing():
    cfg = small_cfg()
    st = init_state(cfg)
    sched = dif.schedule_new(cfg.schedule.T)
    p = puzzle(3, 4, missing=0.3)
    gone = ~p.present
    junk = replace(p, patches=p.patches.copy(), gt_translations=p.gt_translations.copy())
    junk.patches[gone] = 255 - junk.patches[gone]
    junk.gt_translations[gone] = 7.0
    a, _ = compute_loss(st.model, [p], cfg, sched, np.random.default_rng(0))
    b, _ = compute_loss(st.model, [junk], cfg, sched, np.random.default_rng(0))
    assert a.item() == b.item()


def test_chamfer_term_added_in_3d():
    cfg = small_cfg("loss.w_cd=1.0", "encoder.vector_channels=6", "encoder.hidden_channels=4", task="frag3d")
    st = init_state(cfg)
    fs = D.shuffle_instance(D.generate_fragments("box", 3, 0), 0)
    _, rec = compute_loss(st.model, [fs], cfg, dif.schedule_new(20), np.random.default_rng(0))
    assert rec["loss_cd"] > 0
    assert rec["loss"] == pytest.approx(rec["loss_tr"] + rec["loss_rt"] + rec["loss_cd"])


# sampling


@pytest.mark.parametrize("task", ["puzzle2d", "frag3d"])
def test_oracle_solve_converges(task):
    cfg = small_cfg("schedule.T=100", task=task)
    for seed in range(20):
        inst = puzzle(3, seed) if task == "puzzle2d" else \
            D.shuffle_instance(D.generate_fragments(D.SHAPE_KINDS[seed % 4], 3, seed), seed)
        sol = solve(inst, OraclePredictor(), cfg, seed=seed)
        assert np.abs(sol.translations - inst.gt_translations).max() < 1e-4
        if task == "puzzle2d":
            err = np.abs(np.arctan2(sol.rotations[:, 1], sol.rotations[:, 0]) -
                         np.arctan2(inst.gt_rotations[:, 1], inst.gt_rotations[:, 0]))
            err = np.minimum(err, 2 * np.pi - err)
        else:
            err = geo.geodesic_distance(geo.quat_to_matrix(sol.rotations), geo.quat_to_matrix(inst.gt_rotations))
        assert err.max() < 0.05


def test_solve_deterministic():
    cfg = small_cfg()
    torch.manual_seed(0)
    model = AssemblyModel(cfg).eval()
    inst = puzzle(3, 5)
    a, b = solve(inst, model, cfg, seed=3), solve(inst, model, cfg, seed=3)
    assert np.array_equal(a.translations, b.translations) and np.array_equal(a.rotations, b.rotations)
    c = solve(inst, model, cfg, seed=4)
    assert not np.array_equal(a.translations, c.translations)


def test_network_solve_3d_float32_on_manifold():
    cfg = small_cfg("encoder.vector_channels=6", "encoder.hidden_channels=4", task="frag3d")
    torch.manual_seed(1)
    model = AssemblyModel(cfg).eval()
    fs = D.shuffle_instance(D.generate_fragments("sphere", 4, 1), 1)
    sol = solve(fs, model, cfg, seed=0)
    np.testing.assert_allclose(np.linalg.norm(sol.rotations, axis=1), 1, atol=1e-12)
    assert np.isfinite(sol.translations).all()


def test_single_step_returns_denoiser_output():
    cfg = small_cfg("denoiser.single_step=true")
    calls = []

    class Spy(GTPredictor):
        def __call__(self, trans_t, rot_t, t):
            calls.append(t)
            return np.full_like(trans_t, 0.25), np.tile([0.0, 2.0], (len(trans_t), 1))

    inst = puzzle(2, 6)
    sol = solve(inst, Spy(), cfg, seed=0)
    assert calls == [cfg.schedule.T]
    np.testing.assert_array_equal(sol.translations, 0.25)
    np.testing.assert_array_equal(sol.rotations, np.tile([0.0, 1.0], (4, 1)))


def test_solve_missing_rows_are_nan():
    inst = puzzle(3, 7, missing=0.3)
    sol = solve(inst, OraclePredictor(), small_cfg(), seed=0)
    assert np.isnan(sol.translations[~inst.present]).all()
    assert np.isfinite(sol.translations[inst.present]).all()


# evaluation


def test_evaluate_ground_truth_is_perfect():
    cfg = small_cfg("schedule.T=100")
    insts = [puzzle(2 + i % 3, i) for i in range(4)]
    rep = evaluate(insts, OraclePredictor(), cfg, seeds=(0, 1))
    assert rep.direct_comparison == 1.0
    assert rep.rmse_translation < 1e-4 and rep.rmse_rotation_deg < 1e-2
    cfg3 = small_cfg("schedule.T=100", task="frag3d")
    frags = [D.shuffle_instance(D.generate_fragments("box", 3, i), i) for i in range(2)]
    rep3 = evaluate(frags, OraclePredictor(), cfg3, seeds=(0,))
    assert rep3.part_accuracy == 1.0 and rep3.rmse_rotation_deg < 1.0


def test_evaluate_missing_shrinks_denominator():
    cfg = small_cfg()
    insts = [puzzle(4, 0)]
    full = evaluate(insts, OraclePredictor(), cfg, seeds=(0,))
    part = evaluate(insts, OraclePredictor(), cfg, seeds=(0,), missing=0.3)
    assert full.instances[0]["evaluated_pieces"] == 16
    assert part.instances[0]["evaluated_pieces"] == 16 - 5


def test_evaluate_report_schema(tmp_path):
    rep = evaluate([puzzle(2, 1)], OraclePredictor(), small_cfg(), seeds=(0, 1, 2, 3, 4))
    rep.to_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(data, REPORT_SCHEMA)
    assert len(data["metrics"]["direct_comparison"]["values"]) == 5


def test_evaluate_task_mismatch():
    with pytest.raises(ConfigError):
        evaluate([puzzle(2, 0)], OraclePredictor(), small_cfg(task="frag3d"))


# checkpoints and config


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = small_cfg()
    st = init_state(cfg)
    sched = dif.schedule_new(cfg.schedule.T)
    inst = [puzzle(2, 2)]
    train_step(inst, st.model, st.optimizer, cfg, st.rng, sched)
    save_checkpoint(tmp_path / "m.ckpt", st.model, cfg, 1, 0, st.rng, st.optimizer)
    model, saved_cfg, header, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert saved_cfg == cfg and header["step"] == 1
    st.model.eval()
    model.eval()
    a = solve(inst[0], st.model, cfg, seed=1)
    b = solve(inst[0], model, cfg, seed=1)
    assert np.array_equal(a.translations, b.translations) and np.array_equal(a.rotations, b.rotations)


def test_config_overrides_and_validation(tmp_path):
    cfg = with_overrides(small_cfg(), ["optim.lr=0.5", "graph.sparse=true"])
    assert cfg.optim.lr == 0.5 and cfg.graph.sparse is True
    with pytest.raises(ConfigError):
        with_overrides(cfg, ["optim.lr=-1"])
    with pytest.raises(ConfigError):
        with_overrides(cfg, ["loss.w_tr=-1"])
    with pytest.raises(ConfigError):
        with_overrides(cfg, ["nonexistent.key=1"])


# command line


def test_cli_generate_and_exit_codes(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["generate", "--task", "puzzle2d", "--n", "3", "--count", "4", "--patch", "8",
                 "--out", str(out)]) == 0
    insts = D.read_dataset(out)
    assert len(insts) == 4 and insts[0].n == 3
    assert main(["generate", "--task", "frag3d", "--pieces", "3", "--count", "2", "--out",
                 str(tmp_path / "f")]) == 0
    assert main(["train", "optim.lr=-1"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 4
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    assert main(["train", "--config", str(bad)]) == 2


def test_cli_train_eval_round(tmp_path):
    run = tmp_path / "run"
    common = SMALL + ["data.num_images=2", "train.epochs=2", f"out_dir={run}", "eval.seeds=[0]"]
    assert main(["train"] + common) == 0
    assert main(["eval", "--checkpoint", str(run / "model.ckpt")] + common) == 0
    jsonschema.validate(json.loads((run / "report.json").read_text()), REPORT_SCHEMA)


# benchmark


def test_bench_outputs_and_scaling(tmp_path):
    cfg = small_cfg("bench.repeats=3", "bench.steps=4", "graph.sparsifier.prune_fraction=0.8")
    rows = bench(cfg, sizes=[16, 144, 400], out_dir=tmp_path, log=lambda *_: None)
    assert (tmp_path / "bench.csv").exists() and (tmp_path / "time.png").exists()
    assert (tmp_path / "memory.png").exists()
    by = {(r["M"], r["mode"]): r for r in rows}
    assert all(r["status"] == "ok" for r in rows)
    assert by[(400, "dense")]["edge_proxy"] == 400 * 399 // 2
    dense = [by[(M, "dense")]["time_median_s"] for M in (16, 144, 400)]
    assert dense == sorted(dense)
    assert by[(400, "dense")]["time_median_s"] > by[(400, "sparse")]["time_median_s"]
