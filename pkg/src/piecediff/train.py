"""Training: noise ground-truth poses, predict clean poses, Adagrad update."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffusion as dif
from . import geometry as geo
from .denoiser import collate
from .errors import ConfigError, DivergenceError
from .metrics import chamfer_torch, loss_rotation, loss_translation, rep_to_matrix
from .model import AssemblyModel, active_indices, make_graph, rotation_input

log = logging.getLogger(__name__)


def make_optimizer(model, optim_cfg):
    if optim_cfg.algorithm == "adagrad":
        return torch.optim.Adagrad(model.parameters(), lr=optim_cfg.lr)
    if optim_cfg.algorithm == "adam":
        return torch.optim.Adam(model.parameters(), lr=optim_cfg.lr)
    return torch.optim.SGD(model.parameters(), lr=optim_cfg.lr)


def noisy_batch(instances, cfg, sched, rng):
    """Forward-chain samples for each instance: ``(active, t, s0, r0, s_t, r_t_input)``."""
    out = []
    for inst in instances:
        active = active_indices(inst)
        t = sched.T if cfg.denoiser.single_step else int(rng.integers(1, sched.T + 1))
        s0 = np.asarray(inst.gt_translations, dtype=np.float64)[active]
        s_t = dif.forward_euclidean(s0, t, rng.standard_normal(s0.shape), sched)
        if inst.dim == 2:
            r0 = np.asarray(inst.gt_rotations, dtype=np.float64)[active]
            r_t = dif.forward_rotation_2d(r0, t, rng.standard_normal(r0.shape), sched)
        else:
            r0 = np.asarray(inst.gt_rotations, dtype=np.float64)[active]
            r_t = dif.forward_rotation_so3(geo.quat_to_matrix(r0), t, rng, sched)
        out.append((active, t, s0, r0, s_t, rotation_input(r_t, inst.dim)))
    return out


def compute_loss(model, instances, cfg, sched, rng):
    """Composite loss averaged over instances; returns ``(loss, record)``."""
    noisy = noisy_batch(instances, cfg, sched, rng)
    feats = model.encode(instances, [n[0] for n in noisy])
    graphs = []
    for f, (active, t, s0, r0, s_t, r_in) in zip(feats, noisy):
        gseed = int(rng.integers(2 ** 31)) if cfg.graph.resample_each_step else cfg.graph.sparsifier.seed
        graphs.append(make_graph(f, s_t, r_in, cfg.graph, gseed))
    dtype = next(model.parameters()).dtype
    batch = collate(graphs, [n[1] for n in noisy], dtype)
    s_hat, r_hat, _ = model.denoiser(batch)
    gid = batch.graph_of_real
    G = batch.num_graphs
    s0 = torch.as_tensor(np.concatenate([n[2] for n in noisy]), dtype=dtype)
    r0 = torch.as_tensor(np.concatenate([n[3] for n in noisy]), dtype=dtype)
    counts = torch.zeros(G, dtype=dtype).index_add(0, gid, torch.ones_like(gid, dtype=dtype))

    def per_graph(per_node):
        return (torch.zeros(G, dtype=dtype).index_add(0, gid, per_node) / counts).mean()

    l_tr = per_graph(((s_hat - s0) ** 2).sum(-1))
    Rg, Rp = rep_to_matrix(r0), rep_to_matrix(r_hat)
    eye = torch.eye(Rp.shape[-1], dtype=dtype)
    l_rt = per_graph(((Rg.transpose(-1, -2) @ Rp - eye) ** 2).sum((-2, -1)))
    w = cfg.loss
    loss = w.w_tr * l_tr + w.w_rt * l_rt
    record = {"loss_tr": l_tr.item(), "loss_rt": l_rt.item()}
    if w.w_cd > 0 and model.dim == 3:
        clouds = torch.as_tensor(np.concatenate([inst.fragments[n[0]] for inst, n in zip(instances, noisy)]),
                                 dtype=dtype)
        pred = clouds @ Rp.transpose(-1, -2) + s_hat.unsqueeze(1)
        gt = clouds @ Rg.transpose(-1, -2) + s0.unsqueeze(1)
        l_cd = per_graph(chamfer_torch(pred, gt))
        loss = loss + w.w_cd * l_cd
        record["loss_cd"] = l_cd.item()
    record["loss"] = loss.item()
    return loss, record


def train_step(instances, model, optimizer, cfg, rng, sched, step=0):
    if len(instances) == 0:
        raise ConfigError("empty batch")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss, record = compute_loss(model, instances, cfg, sched, rng)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {step}")
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient for {name} at step {step}")
    optimizer.step()
    return record


@dataclass
class TrainState:
    model: AssemblyModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)


def init_state(cfg, model=None):
    torch.manual_seed(cfg.train.seed)
    model = model or AssemblyModel(cfg)
    return TrainState(model, make_optimizer(model, cfg.optim), np.random.default_rng(cfg.train.seed))


def train(instances, cfg, state=None, callback=None):
    """Epoch loop with plateau early stopping and an optional wall-clock budget."""
    if not instances:
        raise ConfigError("no training instances")
    state = state or init_state(cfg)
    sched = dif.schedule_new(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    tc = cfg.train
    best, stale = float("inf"), 0
    start = time.monotonic()
    while state.epoch < tc.epochs:
        order = state.rng.permutation(len(instances))
        records = []
        for i in range(0, len(order), tc.batch_size):
            batch = [instances[j] for j in order[i:i + tc.batch_size]]
            records.append(train_step(batch, state.model, state.optimizer, cfg, state.rng, sched, state.step))
            state.step += 1
        state.epoch += 1
        mean = {k: float(np.mean([r[k] for r in records])) for k in records[0]}
        mean["epoch"] = state.epoch
        mean["minutes"] = (time.monotonic() - start) / 60.0
        state.history.append(mean)
        if state.epoch % tc.log_every == 0:
            log.info("epoch %d loss %.5f (tr %.5f rt %.5f) %.1f min", state.epoch, mean["loss"],
                     mean["loss_tr"], mean["loss_rt"], mean["minutes"])
        if callback is not None and callback(state, mean) is False:
            break
        if mean["loss"] < best - tc.min_delta:
            best, stale = mean["loss"], 0
        else:
            stale += 1
            if stale >= tc.patience:
                log.info("loss plateaued at epoch %d", state.epoch)
                break
        if tc.max_minutes is not None and mean["minutes"] >= tc.max_minutes:
            log.info("time budget reached at epoch %d", state.epoch)
            break
    return state
