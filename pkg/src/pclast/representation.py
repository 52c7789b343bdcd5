"""Joint training of the encoder, multi-step inverse model, metric map, and
latent forward model.

Four learned components share one latent space:
  * ``phi``   encoder, observation -> latent state s_hat
  * ``f_ac``  multi-step inverse model predicting the first action between
              two latents k steps apart (continuous + binned heads)
  * ``psi``   metric map s_hat -> s_bar whose Euclidean distances track
              how many transitions separate states (contrastive objective)
  * ``delta`` one-step latent forward model (Gaussian head, mean + log-var)

The contrastive and forward losses never propagate gradients into ``phi``;
only the inverse objective shapes the encoder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit

from . import nn
from .dataset import TransitionDataset
from .maze import cell_center


class KOutOfRange(ValueError):
    pass


class DatasetTooSmall(ValueError):
    pass


class DegenerateData(ValueError):
    pass


@dataclass
class TrainConfig:
    latent_dim: int = 64
    psi_dim: int = 16
    encoder_hidden: tuple[int, ...] = (64, 128)
    fac_hidden: tuple[int, ...] = (256, 256)
    psi_hidden: tuple[int, ...] = (512, 512)
    delta_hidden: tuple[int, ...] = (256, 256, 256)
    k_max: int = 10
    d_m: int = 2
    batch_size: int = 256
    lr: float = 1e-3
    steps: int = 6000
    seed: int = 0
    mse_scale: float = 10.0
    ce_scale: float = 0.01
    action_bins: int = 20
    k_embed_dim: int = 45
    action_bound: float = 0.2
    encoder_input: str = "onehot"  # "onehot" (flattened image) | "coords"
    nll_forward: bool = False
    contrastive_into_phi: bool = False  # ablation: let the metric loss shape phi

    def __post_init__(self):
        if not (1 <= self.d_m <= self.k_max):
            raise ValueError("need 1 <= d_m <= k_max")
        if self.mse_scale <= 0 or self.ce_scale <= 0:
            raise ValueError("loss scales must be positive")
        if self.encoder_input not in ("onehot", "coords"):
            raise ValueError(f"unknown encoder_input {self.encoder_input!r}")


def bin_actions(actions: np.ndarray, bins: int, bound: float) -> np.ndarray:
    """Uniform discretization of [-bound, bound] per action dimension."""
    width = 2.0 * bound / bins
    idx = np.floor((actions + bound) / width).astype(int)
    return np.clip(idx, 0, bins - 1)


def bin_center(idx: np.ndarray, bins: int, bound: float) -> np.ndarray:
    width = 2.0 * bound / bins
    return -bound + (np.asarray(idx) + 0.5) * width


class ReprModel:
    """Parameter container for phi, f_ac (+ look-ahead embedding), psi, delta."""

    def __init__(self, obs_resolution: int, config: TrainConfig):
        self.obs_resolution = obs_resolution
        self.config = config
        D = config.latent_dim
        cfg = config
        ss = np.random.SeedSequence(cfg.seed)
        seeds = ss.spawn(5)

        if cfg.encoder_input == "onehot":
            phi_sizes = (obs_resolution * obs_resolution, *cfg.encoder_hidden, D)
            input_mode = "index"
        else:
            phi_sizes = (2, *cfg.encoder_hidden, D)
            input_mode = "dense"
        acts = tuple(["leaky_relu"] * (len(phi_sizes) - 2) + ["identity"])
        self.phi = nn.Mlp(nn.MlpSpec(phi_sizes, acts, input_mode=input_mode),
                          seed=seeds[0])

        fac_in = 2 * D + cfg.k_embed_dim
        fac_sizes = (fac_in, *cfg.fac_hidden)
        fac_acts = tuple(["gelu"] * (len(fac_sizes) - 1))
        self.f_ac = nn.Mlp(nn.MlpSpec(fac_sizes, fac_acts,
                                      heads=(2, 2 * cfg.action_bins)),
                           seed=seeds[1])
        rng = np.random.default_rng(seeds[2])
        self.k_embed = nn.he_uniform(rng, cfg.k_embed_dim, (cfg.k_max, cfg.k_embed_dim))

        psi_sizes = (D, *cfg.psi_hidden, cfg.psi_dim)
        psi_acts = tuple(["leaky_relu"] * (len(psi_sizes) - 2) + ["identity"])
        self.psi = nn.Mlp(nn.MlpSpec(psi_sizes, psi_acts), seed=seeds[3])

        delta_sizes = (D + 2, *cfg.delta_hidden, 2 * D)
        delta_acts = tuple(["leaky_relu"] * (len(delta_sizes) - 2) + ["identity"])
        self.delta = nn.Mlp(nn.MlpSpec(delta_sizes, delta_acts), seed=seeds[4])

        self.alpha = np.zeros(())
        self.beta = np.zeros(())

    # -- parameter bookkeeping -------------------------------------------

    def inverse_params(self) -> list[np.ndarray]:
        return self.phi.params + [self.k_embed] + self.f_ac.params

    def contrastive_params(self) -> list[np.ndarray]:
        params = self.psi.params + [self.alpha, self.beta]
        if self.config.contrastive_into_phi:
            params = params + self.phi.params
        return params

    def forward_params(self) -> list[np.ndarray]:
        return self.delta.params

    def all_params(self) -> list[np.ndarray]:
        return (self.phi.params + [self.k_embed] + self.f_ac.params
                + self.psi.params + self.delta.params + [self.alpha, self.beta])

    def description(self) -> str:
        cfg = asdict(self.config)
        cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
        return f"pclast-repr-v1 res={self.obs_resolution} {sorted(cfg.items())}"

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.all_params():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        nn.save_arrays(path, self.description(), self.all_params())

    @classmethod
    def load(cls, path, obs_resolution: int, config: TrainConfig) -> "ReprModel":
        model = cls(obs_resolution, config)
        arrays = nn.load_arrays(path, model.description())
        targets = model.all_params()
        if len(arrays) != len(targets):
            raise ValueError("checkpoint array count mismatch")
        for dst, src in zip(targets, arrays):
            dst[...] = src
        return model

    # -- encoding ----------------------------------------------------------

    def _phi_input(self, cells: np.ndarray):
        if self.config.encoder_input == "onehot":
            return np.asarray(cells)
        return cell_center(np.asarray(cells), self.obs_resolution)

    def encode_cells(self, cells: np.ndarray, tape: nn.Tape | None = None) -> np.ndarray:
        return self.phi.forward(self._phi_input(cells), tape)

    def encode_obs(self, grid: np.ndarray) -> np.ndarray:
        from .maze import cell_of_obs
        return self.encode_cells(np.array([cell_of_obs(grid)]))[0]

    def psi_apply(self, latents: np.ndarray) -> np.ndarray:
        return self.psi.forward(latents)

    def delta_mean(self, latents: np.ndarray, actions: np.ndarray) -> np.ndarray:
        out = self.delta.forward(np.concatenate([latents, actions], axis=1))
        return out[:, : self.config.latent_dim]


# ---------------------------------------------------------------------------
# Losses. Each returns (scalar loss, {param_list_name: grad_list}) so the
# training loop can hand grads to the matching optimizer.


def inverse_loss_terms(pred_cont: np.ndarray, logits: np.ndarray,
                       actions: np.ndarray, bins: int, bound: float,
                       mse_scale: float, ce_scale: float):
    """Loss value and output gradients given raw head outputs.

    Continuous head: scaled squared error summed over action dims. Binned
    head: scaled cross entropy summed over dims. Both averaged over batch.
    """
    B, adim = actions.shape
    diff = pred_cont - actions
    mse_term = mse_scale * float(np.sum(diff * diff)) / B

    lg = logits.reshape(B, adim, bins)
    lg = lg - lg.max(axis=2, keepdims=True)
    logz = np.log(np.exp(lg).sum(axis=2, keepdims=True))
    logp = lg - logz
    target = bin_actions(actions, bins, bound)
    picked = np.take_along_axis(logp, target[:, :, None], axis=2)[:, :, 0]
    ce_term = ce_scale * float(-picked.sum()) / B

    g_cont = mse_scale * 2.0 * diff / B
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, target[:, :, None], 1.0, axis=2)
    g_logits = (ce_scale * (probs - onehot) / B).reshape(B, adim * bins)
    return mse_term + ce_term, mse_term, ce_term, g_cont, g_logits


def loss_inverse(model: ReprModel, cells_t: np.ndarray, actions: np.ndarray,
                 cells_tk: np.ndarray, ks: np.ndarray):
    """Multi-step inverse objective; gradients for phi and f_ac."""
    cfg = model.config
    ks = np.asarray(ks)
    if np.any(ks < 1) or np.any(ks > cfg.k_max):
        raise KOutOfRange(f"look-ahead k outside [1, {cfg.k_max}]")
    B = len(cells_t)
    tape_phi, tape_f = nn.Tape(), nn.Tape()
    latents = model.encode_cells(np.concatenate([cells_t, cells_tk]), tape_phi)
    s_t, s_k = latents[:B], latents[B:]
    emb = model.k_embed[ks - 1]
    x = np.concatenate([s_t, s_k, emb], axis=1)
    pred_cont, logits = model.f_ac.forward(x, tape_f)
    total, _, _, g_cont, g_logits = inverse_loss_terms(
        pred_cont, logits, actions, cfg.action_bins, cfg.action_bound,
        cfg.mse_scale, cfg.ce_scale)

    fac_grads, g_x = model.f_ac.backward(tape_f, [g_cont, g_logits])
    D = cfg.latent_dim
    g_emb = np.zeros_like(model.k_embed)
    nn.scatter_add_rows(g_emb, ks - 1, g_x[:, 2 * D:])
    g_latents = np.concatenate([g_x[:, :D], g_x[:, D:2 * D]], axis=0)
    phi_grads, _ = model.phi.backward(tape_phi, g_latents)
    return total, phi_grads + [g_emb] + fac_grads


def contrastive_pair_losses(dist_sq: np.ndarray, alpha: float, beta: float):
    """Positive/negative losses and d(loss)/d(logit) for squared distances."""
    u = np.exp(alpha) - np.exp(beta) * dist_sq
    loss_pos = np.logaddexp(0.0, -u)
    loss_neg = np.logaddexp(0.0, u)
    dpos_du = expit(u) - 1.0
    dneg_du = expit(u)
    return loss_pos, loss_neg, dpos_du, dneg_du


def loss_contrastive(model: ReprModel, cells_t: np.ndarray,
                     cells_pos: np.ndarray, cells_neg: np.ndarray):
    """Metric-map objective; gradients for psi, alpha, beta (phi untouched
    unless the contrastive_into_phi ablation is enabled)."""
    cfg = model.config
    into_phi = cfg.contrastive_into_phi
    B = len(cells_t)
    phi_tape = nn.Tape() if into_phi else None
    latents = model.encode_cells(
        np.concatenate([cells_t, cells_pos, cells_neg]), phi_tape)
    psi_tape = nn.Tape()
    zs = model.psi.forward(latents, psi_tape)
    z_a, z_p, z_n = zs[:B], zs[B:2 * B], zs[2 * B:]
    alpha = float(model.alpha)
    beta = float(model.beta)
    diff_pos = z_a - z_p
    diff_neg = z_a - z_n
    d2_pos = np.sum(diff_pos * diff_pos, axis=1)
    d2_neg = np.sum(diff_neg * diff_neg, axis=1)
    lp, _, dpos_du, _ = contrastive_pair_losses(d2_pos, alpha, beta)
    _, ln, _, dneg_du = contrastive_pair_losses(d2_neg, alpha, beta)
    total = float(lp.mean() + ln.mean())

    dpos_du = dpos_du / B
    dneg_du = dneg_du / B
    ea, eb = np.exp(alpha), np.exp(beta)
    g_alpha = np.asarray(ea * (dpos_du.sum() + dneg_du.sum()))
    g_beta = np.asarray(-eb * (dpos_du @ d2_pos + dneg_du @ d2_neg))
    g_d2pos = -eb * dpos_du
    g_d2neg = -eb * dneg_du
    g_za = 2.0 * (g_d2pos[:, None] * diff_pos + g_d2neg[:, None] * diff_neg)
    g_zp = -2.0 * g_d2pos[:, None] * diff_pos
    g_zn = -2.0 * g_d2neg[:, None] * diff_neg

    psi_grads, g_latents = model.psi.backward(psi_tape, np.concatenate([g_za, g_zp, g_zn]))
    grads = psi_grads + [g_alpha, g_beta]
    if into_phi:
        phi_grads, _ = model.phi.backward(phi_tape, g_latents)
        grads = grads + phi_grads
    return total, grads


def loss_forward(model: ReprModel, cells_t: np.ndarray, actions: np.ndarray,
                 cells_next: np.ndarray):
    """One-step latent dynamics objective; gradients for delta only."""
    cfg = model.config
    D = cfg.latent_dim
    B = len(cells_t)
    latents = model.encode_cells(np.concatenate([cells_t, cells_next]))
    s_t, s_next = latents[:B], latents[B:]
    tape = nn.Tape()
    out = model.delta.forward(np.concatenate([s_t, actions], axis=1), tape)
    mean, logvar = out[:, :D], out[:, D:]
    B = len(mean)
    diff = mean - s_next
    if cfg.nll_forward:
        inv_var = np.exp(-logvar)
        total = float(0.5 * np.sum(logvar + diff * diff * inv_var)) / B
        g_mean = diff * inv_var / B
        g_logvar = 0.5 * (1.0 - diff * diff * inv_var) / B
    else:
        total = float(np.sum(diff * diff)) / B
        g_mean = 2.0 * diff / B
        g_logvar = np.zeros_like(logvar)
    grads, _ = model.delta.backward(tape, np.concatenate([g_mean, g_logvar], axis=1))
    return total, grads


# ---------------------------------------------------------------------------
# Batch sampling within episode boundaries


class BatchSampler:
    """Draws training tuples whose temporal offsets stay inside one episode."""

    def __init__(self, dataset: TransitionDataset, config: TrainConfig,
                 rng: np.random.Generator):
        if len(dataset) < config.batch_size:
            raise DatasetTooSmall(
                f"{len(dataset)} records < batch size {config.batch_size}")
        self.ds = dataset
        self.cfg = config
        self.rng = rng
        self.n = len(dataset)

    def _offset_pairs(self, max_offset: int):
        """(record index r, offset o) with records r .. r+o-1 in one episode.

        The pair (r, o) links cell_t[r] to cell_next[r + o - 1], a latent
        pair o steps apart.
        """
        B = self.cfg.batch_size
        eps = self.ds.episodes
        out_r = np.empty(B, dtype=np.int64)
        out_o = np.empty(B, dtype=np.int64)
        filled = 0
        while filled < B:
            want = B - filled
            r = self.rng.integers(0, self.n, size=2 * want + 8)
            o = self.rng.integers(1, max_offset + 1, size=r.size)
            ok = (r + o - 1 < self.n)
            ok &= eps[np.minimum(r + o - 1, self.n - 1)] == eps[r]
            r, o = r[ok][:want], o[ok][:want]
            out_r[filled:filled + len(r)] = r
            out_o[filled:filled + len(o)] = o
            filled += len(r)
        return out_r, out_o

    def inverse_batch(self):
        r, k = self._offset_pairs(self.cfg.k_max)
        return (self.ds.cells_t[r], self.ds.actions[r].astype(np.float64),
                self.ds.cells_next[r + k - 1], k)

    def contrastive_batch(self):
        r, d = self._offset_pairs(self.cfg.d_m)
        neg = self.rng.integers(0, self.n, size=self.cfg.batch_size)
        return (self.ds.cells_t[r], self.ds.cells_next[r + d - 1],
                self.ds.cells_t[neg])

    def forward_batch(self):
        r = self.rng.integers(0, self.n, size=self.cfg.batch_size)
        return (self.ds.cells_t[r], self.ds.actions[r].astype(np.float64),
                self.ds.cells_next[r])


def train_joint(dataset: TransitionDataset, config: TrainConfig,
                log_every: int = 0):
    """Train all components jointly; one Adam step per loss per iteration.

    Returns (model, curves) where curves maps loss names to per-step arrays.
    """
    model = ReprModel(dataset.resolution, config)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xBA7C4)))
    sampler = BatchSampler(dataset, config, rng)
    opt_inv = nn.Adam(model.inverse_params(), lr=config.lr)
    opt_con = nn.Adam(model.contrastive_params(), lr=config.lr)
    opt_fwd = nn.Adam(model.forward_params(), lr=config.lr)

    curves = {k: np.zeros(config.steps) for k in ("inverse", "contrastive", "forward")}
    for it in range(config.steps):
        li, gi = loss_inverse(model, *sampler.inverse_batch())
        opt_inv.step(gi)
        lc, gc = loss_contrastive(model, *sampler.contrastive_batch())
        opt_con.step(gc)
        lf, gf = loss_forward(model, *sampler.forward_batch())
        opt_fwd.step(gf)
        curves["inverse"][it] = li
        curves["contrastive"][it] = lc
        curves["forward"][it] = lf
        if log_every and (it + 1) % log_every == 0:
            print(f"step {it + 1:6d}  inverse {li:.4f}  contrastive {lc:.4f}"
                  f"  forward {lf:.5f}", flush=True)
    return model, curves


# ---------------------------------------------------------------------------
# State-probe regression (representation quality metric)


def probe_state_regression(encode_fn, dataset: TransitionDataset, seed: int = 0,
                           hidden: tuple[int, ...] = (128, 128),
                           steps: int = 3000, batch_size: int = 256,
                           lr: float = 1e-3) -> float:
    """Held-out MSE of a small MLP regressing true (x, y) from latents.

    80/20 record split; MSE is the squared error summed over the two
    coordinates, averaged over held-out records.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9E0B)))
    cells = dataset.cells_t
    uniq, inv = np.unique(cells, return_inverse=True)
    latents_uniq = encode_fn(uniq)
    latents = latents_uniq[inv]
    targets = dataset.states.astype(np.float64)

    n = len(dataset)
    perm = rng.permutation(n)
    split = int(0.8 * n)
    train_idx, test_idx = perm[:split], perm[split:]

    D = latents.shape[1]
    sizes = (D, *hidden, 2)
    acts = tuple(["leaky_relu"] * len(hidden) + ["identity"])
    probe = nn.Mlp(nn.MlpSpec(sizes, acts), seed=int(rng.integers(2**31)))
    opt = nn.Adam(probe.params, lr=lr)
    for _ in range(steps):
        idx = train_idx[rng.integers(0, len(train_idx), size=batch_size)]
        tape = nn.Tape()
        pred = probe.forward(latents[idx], tape)
        diff = pred - targets[idx]
        g = 2.0 * diff / batch_size
        grads, _ = probe.backward(tape, g)
        opt.step(grads)

    pred = probe.forward(latents[test_idx])
    err = pred - targets[test_idx]
    return float(np.sum(err * err) / len(test_idx))


# ---------------------------------------------------------------------------
# Brownian contrastive-likelihood oracle (calibration of the sigmoid form)


@dataclass
class ContrastiveOracle:
    sigma0: float
    k: int
    b: float
    c: float
    box: tuple[float, float]


@dataclass
class CalibrationReport:
    bucket_edges: np.ndarray
    empirical: np.ndarray
    predicted: np.ndarray
    max_abs_dev: float
    b_true: float


def sample_brownian_cl(sigma0: float, k: int, n: int, rng: np.random.Generator,
                       box: tuple[float, float] = (0.0, 1.0), dim: int = 2):
    """Draw (s, s', y) from the contrastive generating process.

    With y=1 the partner is a k-step Brownian neighbor whose conditional
    density is proportional to exp(-|s - s'|^2 / (sigma0 * k)), i.e. each
    coordinate moves by a Gaussian with variance sigma0 * k / 2; with y=0
    the partner is uniform on the box.
    """
    lo, hi = box
    s = rng.uniform(lo, hi, size=(n, dim))
    y = (rng.random(n) < 0.5).astype(int)
    std = np.sqrt(sigma0 * k / 2.0)
    neighbor = s + rng.normal(0.0, std, size=(n, dim))
    uniform = rng.uniform(lo, hi, size=(n, dim))
    s_prime = np.where(y[:, None] == 1, neighbor, uniform)
    return s, s_prime, y


def fit_contrastive_oracle(s: np.ndarray, s_prime: np.ndarray, y: np.ndarray,
                           k: int, sigma0: float,
                           box: tuple[float, float] = (0.0, 1.0),
                           n_buckets: int = 10):
    """Fit sigmoid(c - b * d^2) by logistic regression on squared distances."""
    d2 = np.sum((s - s_prime) ** 2, axis=1)
    if float(d2.max() - d2.min()) == 0.0:
        raise DegenerateData("all pair distances identical; cannot fit b")

    # Newton-Raphson on theta = (c, b) with logit z = c - b * d2.
    X = np.stack([np.ones_like(d2), -d2], axis=1)
    theta = np.zeros(2)
    for _ in range(50):
        z = X @ theta
        p = expit(z)
        grad = X.T @ (y - p)
        w = np.maximum(p * (1.0 - p), 1e-12)
        hess = X.T @ (X * w[:, None])
        try:
            delta = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as e:
            raise DegenerateData("singular logistic fit") from e
        theta = theta + delta
        if np.max(np.abs(delta)) < 1e-10:
            break
    c, b = float(theta[0]), float(theta[1])

    edges = np.quantile(d2, np.linspace(0.0, 1.0, n_buckets + 1))
    edges[-1] = np.nextafter(edges[-1], np.inf)
    which = np.clip(np.searchsorted(edges, d2, side="right") - 1, 0, n_buckets - 1)
    empirical = np.zeros(n_buckets)
    predicted = np.zeros(n_buckets)
    p_hat = expit(c - b * d2)
    for j in range(n_buckets):
        mask = which == j
        if mask.any():
            empirical[j] = float(y[mask].mean())
            predicted[j] = float(p_hat[mask].mean())
    max_dev = float(np.max(np.abs(empirical - predicted)))
    oracle = ContrastiveOracle(sigma0=sigma0, k=k, b=b, c=c, box=box)
    report = CalibrationReport(bucket_edges=edges, empirical=empirical,
                               predicted=predicted, max_abs_dev=max_dev,
                               b_true=1.0 / (sigma0 * k))
    return oracle, report
