"""Vision-language latent model: residual CVAE with an adversarial modality head.

Prior: a small transformer over the three observation tokens, pooled per modality,
with an MLP head giving (mu_rho, sigma_rho). Kinematics encoder: MLP over the
flattened future deltas giving (mu_E, sigma_E). Posterior is
N(mu_rho + mu_E, sigma_E^2). The decoder maps (z, state vector) to the
flattened future deltas. A discriminator predicts image presence from z
behind a gradient reversal layer.

Targets and anchor states are standardized with dataset statistics stored
in the model, so ``decode_future`` returns raw units.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from dualproc.core import DEFAULT_STRIDE, DELTA_FRAME_DIM, STATE_DIM, anchor_ticks, delta_future, state_vector
from dualproc.errors import ConfigError, IncompatibilityError, InvalidArgumentError
from dualproc.perception import Perception, record_tokens

SIGMA_FLOOR = 1e-4


@dataclass
class S2Config:
    d_model: int = 64
    d_z: int = 32
    M: int = 4
    layers: int = 2
    heads: int = 4
    ff: int = 128
    enc_hidden: int = 256
    dec_hidden: int = 256
    disc_hidden: int = 64
    beta1: float = 0.1
    beta2: float = 5e-4
    # recon sums over M*45 = 180 entries; scaling the reversed gradient by the same
    # count keeps the encoder-side adversarial weight at beta2 per target entry
    grl_lambda: float = 180.0
    use_encoder: bool = True
    use_discriminator: bool = True
    sample_posterior: bool = True
    use_kl: bool = True
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    ramp_fraction: float = 0.4
    val_fraction: float = 0.1
    input_noise: bool = False
    noise_std: float = 0.01

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "S2Config":
        d = dict(d or {})
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown system2 config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def target_dim(self) -> int:
        return self.M * DELTA_FRAME_DIM


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    sigma: torch.Tensor


# ---------------------------------------------------------------------------
# pieces


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, g):
        return -ctx.lam * g, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    return GradientReversal.apply(x, lam)


def mlp(sizes: list[int], act=nn.ELU) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


def positive(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw) + SIGMA_FLOOR


class PriorNet(nn.Module):
    def __init__(self, cfg: S2Config):
        super().__init__()
        self.type_embed = nn.Parameter(torch.randn(3, cfg.d_model) * 0.02)
        # image tokens are ~10x the text token's norm; equalize before mixing
        self.in_norm = nn.LayerNorm(cfg.d_model)
        self.in_proj = nn.Linear(cfg.d_model, cfg.d_model)
        layer = nn.TransformerEncoderLayer(
            cfg.d_model, cfg.heads, cfg.ff, dropout=0.0, activation="gelu", batch_first=True, norm_first=True
        )
        self.backbone = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = mlp([3 * cfg.d_model, cfg.d_model, 2 * cfg.d_z])
        self.d_z = cfg.d_z

    def pooled(self, tokens: torch.Tensor) -> torch.Tensor:
        h = self.backbone(self.in_proj(self.in_norm(tokens)) + self.type_embed)
        # keep one slot per modality so the text token is not averaged away
        return self.norm(h).flatten(-2)

    def forward(self, tokens: torch.Tensor) -> GaussianLatent:
        out = self.head(self.pooled(tokens))
        return GaussianLatent(out[..., : self.d_z], positive(out[..., self.d_z :]))


class GaussianMLP(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_z: int):
        super().__init__()
        self.net = mlp([d_in, hidden, hidden, 2 * d_z])
        self.d_z = d_z

    def forward(self, x: torch.Tensor) -> GaussianLatent:
        out = self.net(x)
        return GaussianLatent(out[..., : self.d_z], positive(out[..., self.d_z :]))


class System2Model(nn.Module):
    def __init__(self, cfg: S2Config, perception_checksum: str = ""):
        super().__init__()
        self.cfg = cfg
        self.perception_checksum = perception_checksum
        self.prior = PriorNet(cfg)
        self.encoder = GaussianMLP(cfg.target_dim, cfg.enc_hidden, cfg.d_z) if cfg.use_encoder else None
        self.decoder = mlp([cfg.d_z + STATE_DIM, cfg.dec_hidden, cfg.dec_hidden, cfg.target_dim])
        self.discriminator = mlp([cfg.d_z, cfg.disc_hidden, 1]) if cfg.use_discriminator else None
        for name, n in (("target", cfg.target_dim), ("state", STATE_DIM)):
            self.register_buffer(f"{name}_mean", torch.zeros(n))
            self.register_buffer(f"{name}_std", torch.ones(n))

    def set_stats(self, targets: np.ndarray, states: np.ndarray) -> None:
        for name, a in (("target", targets), ("state", states)):
            getattr(self, f"{name}_mean").copy_(torch.as_tensor(a.mean(0)))
            getattr(self, f"{name}_std").copy_(torch.as_tensor(np.maximum(a.std(0), 1e-3)))

    def norm_target(self, y: torch.Tensor) -> torch.Tensor:
        return (y - self.target_mean) / self.target_std

    def norm_state(self, s: torch.Tensor) -> torch.Tensor:
        return (s - self.state_mean) / self.state_std

    def checksum(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self.cfg), sort_keys=True).encode())
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().double().numpy().tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# operations


def _check_tokens(model: System2Model, tokens: torch.Tensor) -> None:
    if tokens.shape[-2:] != (3, model.cfg.d_model):
        raise InvalidArgumentError(f"expected (..., 3, {model.cfg.d_model}) tokens, got {tuple(tokens.shape)}")


def prior_forward(model: System2Model, tokens: torch.Tensor) -> GaussianLatent:
    _check_tokens(model, tokens)
    return model.prior(tokens)


def kinematics_encode(model: System2Model, future: torch.Tensor) -> GaussianLatent:
    if model.encoder is None:
        raise ConfigError("this model was built without a kinematics encoder")
    if future.shape[-1] != model.cfg.target_dim:
        raise InvalidArgumentError(f"future must have {model.cfg.target_dim} entries (M={model.cfg.M})")
    return model.encoder(model.norm_target(future))


def residual_posterior(prior: GaussianLatent, enc: GaussianLatent) -> GaussianLatent:
    if prior.mu.shape != enc.mu.shape or enc.sigma.shape != enc.mu.shape:
        raise InvalidArgumentError("prior and encoder latents must share shape")
    return GaussianLatent(prior.mu + enc.mu, enc.sigma)


def sample_latent(g: GaussianLatent, eps: torch.Tensor) -> torch.Tensor:
    return g.mu + g.sigma * eps


def decode_normalized(model: System2Model, z: torch.Tensor, s_t: torch.Tensor) -> torch.Tensor:
    if z.shape[-1] != model.cfg.d_z or s_t.shape[-1] != STATE_DIM:
        raise InvalidArgumentError("latent or state dimension mismatch")
    return model.decoder(torch.cat([z, model.norm_state(s_t)], dim=-1))


def decode_future(model: System2Model, z: torch.Tensor, s_t: torch.Tensor) -> torch.Tensor:
    """Predicted flattened DeltaFuture in raw units (M * 45 values)."""
    return decode_normalized(model, z, s_t) * model.target_std + model.target_mean


def discriminate(model: System2Model, z: torch.Tensor, reverse: bool = False) -> torch.Tensor:
    """Probability that a real image was present; ``reverse`` inserts the GRL."""
    if model.discriminator is None:
        raise ConfigError("this model was built without a discriminator")
    x = grad_reverse(z, model.cfg.grl_lambda) if reverse else z
    return torch.sigmoid(model.discriminator(x)).squeeze(-1)


def discriminator_logits(model: System2Model, z: torch.Tensor, reverse: bool) -> torch.Tensor:
    x = grad_reverse(z, model.cfg.grl_lambda) if reverse else z
    return model.discriminator(x).squeeze(-1)


def gaussian_kl(q: GaussianLatent, p: GaussianLatent) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    var_ratio = (q.sigma / p.sigma) ** 2
    mean_term = ((q.mu - p.mu) / p.sigma) ** 2
    return 0.5 * torch.sum(var_ratio + mean_term - 1.0 - torch.log(var_ratio), dim=-1)


@dataclass
class S2Batch:
    tokens: torch.Tensor  # (B, 3, d)
    state: torch.Tensor  # (B, 38)
    target: torch.Tensor  # (B, M*45)
    blind: torch.Tensor  # (B,) float, 1 = no image


@dataclass
class S2Losses:
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    disc: torch.Tensor
    z: Optional[torch.Tensor] = None


def latent_for_training(model: System2Model, batch: S2Batch, eps: Optional[torch.Tensor]):
    prior = prior_forward(model, batch.tokens)
    if model.encoder is not None:
        post = residual_posterior(prior, kinematics_encode(model, batch.target))
    else:
        post = prior
    if model.cfg.sample_posterior:
        if eps is None:
            eps = torch.randn_like(post.mu)
        z = sample_latent(post, eps)
    else:
        z = post.mu
    return prior, post, z


def s2_loss(
    model: System2Model,
    batch: S2Batch,
    eps: Optional[torch.Tensor],
    schedules: tuple[float, float] = (1.0, 1.0),
    reverse: bool = True,
) -> S2Losses:
    """recon + s1*beta1*KL(q||p) + s2*beta2*BCE(disc(GRL(z)), image present)."""
    s1, s2 = (float(s) for s in schedules)
    if not (0.0 <= s1 <= 1.0 and 0.0 <= s2 <= 1.0) or math.isnan(s1) or math.isnan(s2):
        raise InvalidArgumentError("schedules must lie in [0, 1]")
    cfg = model.cfg
    prior, post, z = latent_for_training(model, batch, eps)
    pred = decode_normalized(model, z, batch.state)
    recon = torch.mean(torch.sum((pred - model.norm_target(batch.target)) ** 2, dim=-1))
    zero = recon.new_zeros(())
    kl = torch.mean(gaussian_kl(post, prior)) if cfg.use_kl else zero
    if model.discriminator is not None:
        logits = discriminator_logits(model, z, reverse)
        disc = F.binary_cross_entropy_with_logits(logits, 1.0 - batch.blind)
    else:
        disc = zero
    total = recon
    if s1 > 0.0 and cfg.use_kl:
        total = total + s1 * cfg.beta1 * kl
    if s2 > 0.0 and model.discriminator is not None:
        total = total + s2 * cfg.beta2 * disc
    return S2Losses(total, recon, kl, disc, z)


def ramp(epoch: int, total_epochs: int, fraction: float = 0.4) -> float:
    """Linear 0 -> 1 over the first ``fraction`` of epochs, then 1."""
    span = fraction * total_epochs
    if span <= 0:
        return 1.0
    return float(min(1.0, epoch / span))


# ---------------------------------------------------------------------------
# data


@dataclass
class S2Arrays:
    tokens: np.ndarray
    state: np.ndarray
    target: np.ndarray
    blind: np.ndarray
    record: np.ndarray  # record index of every sample
    tick: np.ndarray

    def __len__(self) -> int:
        return len(self.blind)

    def subset(self, idx) -> "S2Arrays":
        return S2Arrays(*(getattr(self, f.name)[idx] for f in fields(self)))

    def batch(self, idx, dtype=torch.float32) -> S2Batch:
        t = lambda a: torch.as_tensor(a[idx], dtype=dtype)
        return S2Batch(t(self.tokens), t(self.state), t(self.target), t(self.blind))


def dataset_tokens(perc: Perception, dataset) -> list[np.ndarray]:
    return [record_tokens(perc, r) for r in dataset.records]


def build_arrays(dataset, tokens: list[np.ndarray], M: int, stride: int = DEFAULT_STRIDE) -> S2Arrays:
    cols: dict[str, list] = {k: [] for k in ("tokens", "state", "target", "blind", "record", "tick")}
    for i, (rec, tok) in enumerate(zip(dataset.records, tokens)):
        traj = rec.traj
        for t in anchor_ticks(len(traj), M, stride):
            k = t // stride
            cols["tokens"].append(tok[k])
            cols["state"].append(state_vector(traj.frame(t)))
            cols["target"].append(delta_future(traj, t, M, stride).flatten())
            cols["blind"].append(float(rec.blind))
            cols["record"].append(i)
            cols["tick"].append(k)
    if not cols["blind"]:
        raise ConfigError("dataset produced no training samples")
    return S2Arrays(
        np.asarray(cols["tokens"]),
        np.asarray(cols["state"]),
        np.asarray(cols["target"]),
        np.asarray(cols["blind"]),
        np.asarray(cols["record"]),
        np.asarray(cols["tick"]),
    )


def split_records(n_records: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 17])
    perm = rng.permutation(n_records)
    n_val = int(round(val_fraction * n_records))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# ---------------------------------------------------------------------------
# training


@dataclass
class S2Metrics:
    epochs: list[dict] = field(default_factory=list)
    val_records: list[int] = field(default_factory=list)

    def last(self) -> dict:
        return self.epochs[-1] if self.epochs else {}


def _optimizers(model: System2Model, lr: float):
    disc = list(model.discriminator.parameters()) if model.discriminator is not None else []
    disc_ids = {id(p) for p in disc}
    upstream = [p for p in model.parameters() if id(p) not in disc_ids]
    opts = [torch.optim.Adam(upstream, lr=lr)]
    if disc:
        opts.append(torch.optim.Adam(disc, lr=lr))
    return opts


@torch.no_grad()
def evaluate_recon(model: System2Model, arrays: S2Arrays, mode: str = "posterior", seed: int = 0, batch: int = 1024) -> float:
    """Mean per-sample reconstruction loss; ``mode`` is posterior, prior_mean or random."""
    model.eval()
    g = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    total, n = 0.0, 0
    for start in range(0, len(arrays), batch):
        idx = np.arange(start, min(start + batch, len(arrays)))
        b = arrays.batch(idx, dtype)
        prior = prior_forward(model, b.tokens)
        if mode == "random":
            z = torch.randn(prior.mu.shape, generator=g, dtype=dtype)
        elif mode == "prior_mean":
            z = prior.mu
        else:
            post = residual_posterior(prior, kinematics_encode(model, b.target)) if model.encoder is not None else prior
            eps = torch.randn(post.mu.shape, generator=g, dtype=dtype)
            z = sample_latent(post, eps) if model.cfg.sample_posterior else post.mu
        pred = decode_normalized(model, z, b.state)
        err = torch.sum((pred - model.norm_target(b.target)) ** 2, dim=-1)
        total += float(err.sum())
        n += len(idx)
    return total / max(n, 1)


def train_system2(
    dataset,
    config: Optional[S2Config] = None,
    seed: int = 0,
    perception: Optional[Perception] = None,
    tokens: Optional[list[np.ndarray]] = None,
    log=None,
) -> tuple[System2Model, S2Metrics]:
    cfg = config or S2Config()
    if dataset is None or len(dataset.records) == 0:
        raise ConfigError("cannot train on an empty dataset")
    perc = perception or Perception(0, cfg.d_model)
    if perc.d_model != cfg.d_model:
        raise ConfigError("perception width does not match the model width")
    tokens = tokens if tokens is not None else dataset_tokens(perc, dataset)
    arrays = build_arrays(dataset, tokens, cfg.M)
    tr_rec, va_rec = split_records(len(dataset.records), cfg.val_fraction, seed)
    tr_mask = np.isin(arrays.record, tr_rec)
    train, val = arrays.subset(tr_mask), arrays.subset(~tr_mask)

    torch.manual_seed(seed)
    model = System2Model(cfg, perc.checksum)
    model.set_stats(train.target, train.state)
    opts = _optimizers(model, cfg.lr)
    rng = np.random.default_rng([seed, 3])
    metrics = S2Metrics(val_records=[int(i) for i in va_rec])

    for epoch in range(cfg.epochs):
        s = ramp(epoch, cfg.epochs, cfg.ramp_fraction)
        model.train()
        perm = rng.permutation(len(train))
        sums = {"total": 0.0, "recon": 0.0, "kl": 0.0, "disc": 0.0}
        nb = 0
        for start in range(0, len(perm), cfg.batch_size):
            b = train.batch(perm[start : start + cfg.batch_size])
            if cfg.input_noise:
                b.state = b.state + cfg.noise_std * torch.randn_like(b.state)
            out = s2_loss(model, b, None, (s, s))
            for o in opts:
                o.zero_grad(set_to_none=True)
            out.total.backward()
            for o in opts:
                o.step()
            for k in sums:
                sums[k] += float(getattr(out, k).detach())
            nb += 1
        row = {"epoch": epoch, "schedule": s, **{k: v / nb for k, v in sums.items()}}
        if len(val):
            row["val_recon"] = evaluate_recon(model, val, "posterior", seed)
        metrics.epochs.append(row)
        if log is not None:
            log(row)
    model.eval()
    return model, metrics


# ---------------------------------------------------------------------------
# caching and persistence


@torch.no_grad()
def prior_sequence(model: System2Model, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    model.eval()
    dtype = next(model.parameters()).dtype
    g = prior_forward(model, torch.as_tensor(tokens, dtype=dtype))
    return g.mu.double().numpy(), g.sigma.double().numpy()


@dataclass
class LatentCache:
    mu: list[np.ndarray]  # per record (ticks, d_z)
    sigma: list[np.ndarray]
    record_seeds: list[int]
    model_checksum: str
    perception_checksum: str
    blind: list[bool]

    def __len__(self) -> int:
        return len(self.mu)


def cache_latents(model: System2Model, dataset, perception: Perception, tokens=None) -> LatentCache:
    if perception.checksum != model.perception_checksum:
        raise IncompatibilityError("perception encoders differ from those the model was trained with")
    tokens = tokens if tokens is not None else dataset_tokens(perception, dataset)
    mus, sigmas = [], []
    for tok in tokens:
        m, s = prior_sequence(model, tok)
        mus.append(m)
        sigmas.append(s)
    return LatentCache(
        mus,
        sigmas,
        [r.seed for r in dataset.records],
        model.checksum(),
        perception.checksum,
        [bool(r.blind) for r in dataset.records],
    )


def save_cache(path, cache: LatentCache) -> None:
    header = {
        "record_seeds": cache.record_seeds,
        "model_checksum": cache.model_checksum,
        "perception_checksum": cache.perception_checksum,
        "blind": cache.blind,
        "white_noise_seed_rule": "default_rng([record_seed, tick, view]) with view 0=ego, 1=exo",
    }
    arrays = {"header": np.array(json.dumps(header))}
    for i, (m, s) in enumerate(zip(cache.mu, cache.sigma)):
        arrays[f"mu_{i}"] = m
        arrays[f"sigma_{i}"] = s
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_cache(path) -> LatentCache:
    with np.load(path, allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        n = len(h["record_seeds"])
        mu = [z[f"mu_{i}"] for i in range(n)]
        sigma = [z[f"sigma_{i}"] for i in range(n)]
    return LatentCache(mu, sigma, h["record_seeds"], h["model_checksum"], h["perception_checksum"], h["blind"])


def save_model(path, model: System2Model) -> None:
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    payload = {
        "config": asdict(model.cfg),
        "perception_checksum": model.perception_checksum,
        "checksum": model.checksum(),
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(payload)), state=np.frombuffer(buf.getvalue(), dtype=np.uint8))


def load_model(path, perception: Optional[Perception] = None) -> System2Model:
    with np.load(Path(path), allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        state = torch.load(io.BytesIO(z["state"].tobytes()), weights_only=True)
    model = System2Model(S2Config.from_dict(h["config"]), h["perception_checksum"])
    model.load_state_dict(state)
    model.eval()
    if model.checksum() != h["checksum"]:
        raise IncompatibilityError(f"model file {path} is corrupt")
    if perception is not None and perception.checksum != model.perception_checksum:
        raise IncompatibilityError("perception encoders differ from those the model was trained with")
    return model
