"""CycleGAN objectives, Adam, the learning-rate schedule and the training loop.

Notation: ``g_st`` maps source -> target, ``g_ts`` maps target -> source,
``d_s`` / ``d_t`` score source / target features.  Discriminators use the
least-squares objective (real -> 1, fake -> 0); generators minimise the
sum of both adversarial terms plus the weighted two-way L1 cycle loss.
"""
from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import (
    Checkpoint,
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """NaN/Inf in a loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    seq_len: int = 127
    epochs: int = 50
    lr_gen: float = 3e-4
    lr_disc: float = 1e-4
    plateau_epochs: int = 15
    lr_min: float = 1e-6
    lambda_cyc: float = 2.5
    lambda_adv: float = 1.0
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_disc: bool = True
    gen_base: int = 32
    n_resblocks: int = 9
    disc_base: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_gen, self.lr_disc, self.lr_min) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.plateau_epochs < self.epochs:
            raise ValueError("need 0 <= plateau_epochs < epochs")
        if self.lambda_cyc < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.seq_len < 16:
            raise ValueError("batch_size >= 1 and seq_len >= 16 required")

    @property
    def gen_spec(self) -> GeneratorSpec:
        return GeneratorSpec(base_channels=self.gen_base, n_resblocks=self.n_resblocks)

    @property
    def disc_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec.scaled(self.disc_base)


# ---------------------------------------------------------------------------
# batches


@dataclass
class FeatureBatch:
    data: np.ndarray  # [batch, 1, mel_bins, seq_len]
    utt_ids: list


class InsufficientDataError(ValueError):
    pass


def eligible(store, seq_len: int) -> list:
    """Indices of utterances with at least ``seq_len`` frames; warns on the rest."""
    keep = []
    for i, (uid, feats) in enumerate(store):
        if feats.shape[0] >= seq_len:
            keep.append(i)
        else:
            log.warning("skipping %s: %d frames < seq_len %d", uid, feats.shape[0], seq_len)
    if not keep:
        raise InsufficientDataError(f"no utterance has >= {seq_len} frames")
    return keep


def sample_batch(store, rng: np.random.Generator, batch_size: int, seq_len: int, indices=None) -> FeatureBatch:
    """Random contiguous crops from ``store`` (list of ``(utt_id, frames x mel)``).

    ``indices`` fixes which utterances to crop; otherwise utterances are drawn
    uniformly with replacement from the eligible ones.
    """
    if indices is None:
        pool = eligible(store, seq_len)
        indices = [pool[j] for j in rng.integers(0, len(pool), size=batch_size)]
    crops, ids = [], []
    for i in indices:
        uid, feats = store[i]
        n = feats.shape[0]
        if n < seq_len:
            raise InsufficientDataError(f"{uid}: {n} frames < seq_len {seq_len}")
        off = int(rng.integers(0, n - seq_len + 1))
        crops.append(feats[off : off + seq_len].T)
        ids.append(uid)
    return FeatureBatch(np.stack(crops)[:, None, :, :], ids)


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at_epoch(cfg: TrainConfig, epoch: int, base_lr: float) -> float:
    """Constant for the plateau epochs, then linear down to ``lr_min`` at the last epoch."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch <= cfg.plateau_epochs:
        return base_lr
    frac = (epoch - cfg.plateau_epochs) / (cfg.epochs - cfg.plateau_epochs)
    return (1.0 - frac) * base_lr + frac * cfg.lr_min


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` (name -> Tensor)."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient for {name} ({bad} entries)")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if p.data.shape != g.shape:
            raise ad.ShapeError(f"{name}: grad shape {g.shape} != param shape {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# objectives


def _x(batch) -> Tensor:
    if isinstance(batch, Tensor):
        return batch
    if isinstance(batch, FeatureBatch):
        return Tensor(batch.data)
    return Tensor(batch)


@contextlib.contextmanager
def frozen(*nets):
    """Stop gradient bookkeeping for the parameters of ``nets``."""
    saved = [(p, p.requires_grad) for n in nets for p in n.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def disc_loss(d, g_opposite, x_real, x_other, fake=None) -> Tensor:
    """mean[D(G(x_other))^2] + mean[(D(x_real) - 1)^2]; the fakes are detached."""
    if fake is None:
        with ad.no_grad():
            fake = g_opposite(_x(x_other))
    fake = ad.detach(fake)
    return ad.add(ad.mean_square(d(fake), 0.0), ad.mean_square(d(_x(x_real)), 1.0))


def adv_loss(d, g, x, fake=None) -> Tensor:
    """mean[(D(G(x)) - 1)^2]; gradients reach G only."""
    if fake is None:
        fake = g(_x(x))
    with frozen(d):
        return ad.mean_square(d(fake), 1.0)


def cycle_loss(g_st, g_ts, x_s, x_t, fake_t=None, fake_s=None) -> Tensor:
    """mean|G_ts(G_st(x_s)) - x_s| + mean|G_st(G_ts(x_t)) - x_t|."""
    xs, xt = _x(x_s), _x(x_t)
    if fake_t is None:
        fake_t = g_st(xs)
    if fake_s is None:
        fake_s = g_ts(xt)
    forward = ad.mean_abs(g_ts(fake_t), xs)
    backward = ad.mean_abs(g_st(fake_s), xt)
    return ad.add(forward, backward)


def total_generator_loss(cfg, g_st, g_ts, d_s, d_t, x_s, x_t) -> tuple:
    """Weighted generator objective; returns ``(total, parts)``.

    ``parts`` holds the three terms and the two generated batches so the
    discriminator update can reuse them.
    """
    xs, xt = _x(x_s), _x(x_t)
    fake_t = g_st(xs)
    fake_s = g_ts(xt)
    l_adv_ts = adv_loss(d_s, g_ts, xt, fake=fake_s)
    l_adv_st = adv_loss(d_t, g_st, xs, fake=fake_t)
    l_cyc = cycle_loss(g_st, g_ts, xs, xt, fake_t=fake_t, fake_s=fake_s)
    total = ad.add(ad.scale(ad.add(l_adv_ts, l_adv_st), cfg.lambda_adv), ad.scale(l_cyc, cfg.lambda_cyc))
    parts = {"adv_ts": l_adv_ts, "adv_st": l_adv_st, "cyc": l_cyc, "fake_s": fake_s, "fake_t": fake_t}
    return total, parts


# ---------------------------------------------------------------------------
# state and loop


@dataclass
class StepReport:
    epoch: int
    step: int
    adv_ts: float
    adv_st: float
    cyc: float
    disc_s: float
    disc_t: float
    lr_g: float
    lr_d: float
    total: float = 0.0

    def line(self) -> str:
        vals = (self.adv_ts, self.adv_st, self.cyc, self.disc_s, self.disc_t, self.lr_g, self.lr_d)
        return f"{self.epoch} {self.step} " + " ".join(f"{v:.8g}" for v in vals)


def pack_rng(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    mask = (1 << 64) - 1
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array(
        [s >> 64, s & mask, inc >> 64, inc & mask, st["has_uint32"], st["uinteger"]],
        dtype=np.uint64,
    )


def unpack_rng(words) -> np.random.Generator:
    w = [int(x) for x in words]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return rng


class TrainState:
    """The four networks, two optimizers, sampler RNG and progress counters."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).generate_state(5)
        self.g_st = build_generator(cfg.gen_spec, int(seeds[0]))
        self.g_ts = build_generator(cfg.gen_spec, int(seeds[1]))
        self.d_s = build_discriminator(cfg.disc_spec, int(seeds[2]))
        self.d_t = build_discriminator(cfg.disc_spec, int(seeds[3]))
        self.rng = np.random.default_rng(int(seeds[4]))
        self.opt_g = AdamState()
        self.opt_d = AdamState()
        self.epoch = 0
        self.step = 0
        self.lr_g = cfg.lr_gen
        self.lr_d = cfg.lr_disc

    def nets(self) -> dict:
        return {"G_st": self.g_st, "G_ts": self.g_ts, "D_s": self.d_s, "D_t": self.d_t}

    def gen_params(self) -> dict:
        return {f"{k}/{n}": p for k in ("G_st", "G_ts") for n, p in self.nets()[k].named_parameters()}

    def disc_params(self) -> dict:
        return {f"{k}/{n}": p for k in ("D_s", "D_t") for n, p in self.nets()[k].named_parameters()}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch
        self.lr_g = lr_at_epoch(self.cfg, epoch, self.cfg.lr_gen)
        self.lr_d = lr_at_epoch(self.cfg, epoch, self.cfg.lr_disc) if self.cfg.decay_disc else self.cfg.lr_disc

    def to_checkpoint(self) -> Checkpoint:
        ck = Checkpoint(epoch=self.epoch, rng_state=pack_rng(self.rng))
        ck.specs = {
            "G.base_channels": self.cfg.gen_base,
            "G.n_resblocks": self.cfg.n_resblocks,
            "D.base_channels": self.cfg.disc_base,
        }
        for k, net in self.nets().items():
            for n, p in net.named_parameters():
                ck.params[f"{k}/{n}"] = p.data.copy()
        for oname, opt in (("G", self.opt_g), ("D", self.opt_d)):
            ck.steps[oname] = opt.step
            for n in opt.m:
                ck.optim[f"{oname}/m/{n}"] = opt.m[n].copy()
                ck.optim[f"{oname}/v/{n}"] = opt.v[n].copy()
        return ck

    @classmethod
    def from_checkpoint(cls, cfg: TrainConfig, ck: Checkpoint) -> "TrainState":
        st = cls(cfg)
        for k, net in st.nets().items():
            net.load_state_dict({n[len(k) + 1 :]: v for n, v in ck.params.items() if n.startswith(k + "/")})
        for oname, opt in (("G", st.opt_g), ("D", st.opt_d)):
            opt.step = ck.steps.get(oname, 0)
            for key, arr in ck.optim.items():
                head, kind, name = key.split("/", 2)
                if head == oname:
                    (opt.m if kind == "m" else opt.v)[name] = arr.copy()
        st.epoch = ck.epoch
        if ck.rng_state is not None:
            st.rng = unpack_rng(ck.rng_state)
        return st


def _grads(params: dict) -> dict:
    return {n: p.grad for n, p in params.items()}


def _check_finite(values: dict, batch_ids) -> None:
    for k, v in values.items():
        if not math.isfinite(v):
            raise NumericError(f"{k} is {v}; last batch: {list(batch_ids)}")


def train_step(state: TrainState, batch_s: FeatureBatch, batch_t: FeatureBatch) -> StepReport:
    """One generator update followed by one update of each discriminator."""
    cfg = state.cfg
    gparams, dparams = state.gen_params(), state.disc_params()
    for p in list(gparams.values()) + list(dparams.values()):
        p.grad = None

    total, parts = total_generator_loss(cfg, state.g_st, state.g_ts, state.d_s, state.d_t, batch_s, batch_t)
    vals = {k: parts[k].item() for k in ("adv_ts", "adv_st", "cyc")}
    vals["total"] = total.item()
    _check_finite(vals, batch_s.utt_ids + batch_t.utt_ids)
    ad.backward(total)
    adam_step(gparams, _grads(gparams), state.opt_g, state.lr_g, cfg.beta1, cfg.beta2, cfg.adam_eps)

    l_ds = disc_loss(state.d_s, state.g_ts, batch_s, batch_t, fake=parts["fake_s"])
    l_dt = disc_loss(state.d_t, state.g_st, batch_t, batch_s, fake=parts["fake_t"])
    vals["disc_s"], vals["disc_t"] = l_ds.item(), l_dt.item()
    _check_finite(vals, batch_s.utt_ids + batch_t.utt_ids)
    ad.backward(ad.add(l_ds, l_dt))
    adam_step(dparams, _grads(dparams), state.opt_d, state.lr_d, cfg.beta1, cfg.beta2, cfg.adam_eps)
    for p in list(gparams.values()) + list(dparams.values()):
        p.grad = None

    state.step += 1
    return StepReport(state.epoch, state.step, vals["adv_ts"], vals["adv_st"], vals["cyc"],
                      vals["disc_s"], vals["disc_t"], state.lr_g, state.lr_d, vals["total"])


def steps_per_epoch(n_source: int, batch_size: int) -> int:
    return math.ceil(n_source / batch_size)


def run_epoch(state: TrainState, source_store, target_store, src_pool, tgt_pool) -> list:
    cfg = state.cfg
    rng = state.rng
    n_steps = steps_per_epoch(len(src_pool), cfg.batch_size)
    order = [src_pool[i] for i in rng.permutation(len(src_pool))]
    reports = []
    for k in range(n_steps):
        idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        if len(idx) < cfg.batch_size:
            idx = idx + [src_pool[j] for j in rng.integers(0, len(src_pool), cfg.batch_size - len(idx))]
        b_s = sample_batch(source_store, rng, cfg.batch_size, cfg.seq_len, indices=idx)
        t_idx = [tgt_pool[j] for j in rng.integers(0, len(tgt_pool), cfg.batch_size)]
        b_t = sample_batch(target_store, rng, cfg.batch_size, cfg.seq_len, indices=t_idx)
        reports.append(train_step(state, b_s, b_t))
    return reports


def checkpoint_path(ckpt_dir, epoch: int) -> Path:
    return Path(ckpt_dir) / f"epoch_{epoch:03d}.fmap"


def train(cfg: TrainConfig, source_store, target_store, ckpt_dir, resume=None, log_fh=None) -> list:
    """Train for ``cfg.epochs`` epochs, writing one checkpoint per epoch.

    An epoch is complete when every eligible source utterance has been
    cropped once.  ``resume`` is a checkpoint path to continue from.
    Returns the list of checkpoint paths written.
    """
    if not source_store or not target_store:
        raise InsufficientDataError("source and target feature stores must be non-empty")
    src_pool = eligible(source_store, cfg.seq_len)
    tgt_pool = eligible(target_store, cfg.seq_len)
    if resume is not None:
        state = TrainState.from_checkpoint(cfg, load_checkpoint(resume))
    else:
        state = TrainState(cfg)
    written = []
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        state.set_epoch(epoch)
        for rep in run_epoch(state, source_store, target_store, src_pool, tgt_pool):
            if log_fh is not None:
                log_fh.write(rep.line() + "\n")
        path = checkpoint_path(ckpt_dir, epoch)
        save_checkpoint(path, state.to_checkpoint())
        log.info("epoch %d done, checkpoint %s", epoch, path)
        written.append(path)
    return written


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
