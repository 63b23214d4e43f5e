import logging
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, fields
from os import PathLike
from typing import Sequence

import torch
from torch import Tensor
from torch.autograd import Function
from tqdm import tqdm

from .config import ConfigurationError, DivergenceError, InsufficientHistoryError
from .geo import TimestampedPoint, Trajectory
from .preprocess import split_contiguous

logger = logging.getLogger(__name__)

N_FEATURES = 4
N_OUTPUTS = 2
MODEL_FORMAT = "torch-comove-gru/1"


@dataclass
class PredictorConfig:
    hidden_size: int = 150
    dense_size: int = 50
    window_len: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 100
    batch_size: int = 32
    rng_seed: int = 0
    horizon_steps: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        self.horizon_steps = tuple(int(h) for h in self.horizon_steps)
        for name in ("hidden_size", "dense_size", "window_len", "epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer.")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigurationError("Adam betas must lie in (0, 1).")
        if self.learning_rate <= 0.0 or self.eps_adam <= 0.0:
            raise ConfigurationError("learning_rate and eps_adam must be positive.")
        if not self.horizon_steps or min(self.horizon_steps) < 1:
            raise ConfigurationError("horizon_steps must be positive grid steps.")


def featurize(traj: Trajectory, horizon: float) -> Tensor:
    """Rows (d_lon, d_lat, d_t, horizon) for every consecutive pair of points."""
    if horizon <= 0.0:
        raise ValueError("Prediction horizon must be positive.")
    if len(traj) < 2:
        raise InsufficientHistoryError("insufficient history")
    d_lon = torch.diff(traj.lon)
    return torch.stack(
        [d_lon, torch.diff(traj.lat), torch.diff(traj.t), torch.full_like(d_lon, horizon)],
        dim=-1,
    )


@dataclass
class GruParams:
    """Weights of the GRU layer, the dense layer and the output layer.

    Matrices are stored as (out_features, in_features), e.g. W_pz is (H, 4).
    """

    W_pz: Tensor
    W_pr: Tensor
    W_ph: Tensor
    W_hz: Tensor
    W_hr: Tensor
    W_hh: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor
    W_d: Tensor
    b_d: Tensor
    W_o: Tensor
    b_o: Tensor

    def __post_init__(self):
        if self.W_hz.ndim != 2 or self.W_d.ndim != 2:
            raise ConfigurationError("W_hz and W_d must be matrices.")
        H = self.W_hz.shape[0]
        D = self.W_d.shape[0]
        expected = {
            "W_pz": (H, N_FEATURES),
            "W_pr": (H, N_FEATURES),
            "W_ph": (H, N_FEATURES),
            "W_hz": (H, H),
            "W_hr": (H, H),
            "W_hh": (H, H),
            "b_z": (H,),
            "b_r": (H,),
            "b_h": (H,),
            "W_d": (D, H),
            "b_d": (D,),
            "W_o": (N_OUTPUTS, D),
            "b_o": (N_OUTPUTS,),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if tuple(value.shape) != shape:
                raise ConfigurationError(
                    f"{name} has shape {tuple(value.shape)}, expected {shape}."
                )
            if not torch.isfinite(value).all():
                raise ConfigurationError(f"{name} contains non-finite entries.")

    @property
    def hidden_size(self) -> int:
        return self.W_hz.shape[0]

    @property
    def dense_size(self) -> int:
        return self.W_d.shape[0]

    @classmethod
    def init(
        cls, hidden_size: int, dense_size: int, generator: torch.Generator | None = None
    ) -> "GruParams":
        """Glorot-uniform matrices and zero biases."""

        def glorot(n_out, n_in):
            a = math.sqrt(6.0 / (n_in + n_out))
            u = torch.rand(n_out, n_in, generator=generator, dtype=torch.float64)
            return (2.0 * u - 1.0) * a

        H, D = hidden_size, dense_size
        zeros = lambda n: torch.zeros(n, dtype=torch.float64)  # noqa: E731
        return cls(
            glorot(H, N_FEATURES),
            glorot(H, N_FEATURES),
            glorot(H, N_FEATURES),
            glorot(H, H),
            glorot(H, H),
            glorot(H, H),
            zeros(H),
            zeros(H),
            zeros(H),
            glorot(D, H),
            zeros(D),
            glorot(N_OUTPUTS, D),
            zeros(N_OUTPUTS),
        )

    @classmethod
    def zeros(cls, hidden_size: int, dense_size: int) -> "GruParams":
        H, D = hidden_size, dense_size
        shapes = [(H, N_FEATURES)] * 3 + [(H, H)] * 3 + [(H,)] * 3
        shapes += [(D, H), (D,), (N_OUTPUTS, D), (N_OUTPUTS,)]
        return cls(*[torch.zeros(s, dtype=torch.float64) for s in shapes])

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]

    def as_dict(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict[str, Tensor]) -> "GruParams":
        names = [f.name for f in fields(cls)]
        missing = set(names) - set(data)
        if missing:
            raise ConfigurationError(f"Missing parameter blocks: {sorted(missing)}.")
        return cls(*[torch.as_tensor(data[n], dtype=torch.float64) for n in names])

    def detach(self) -> "GruParams":
        return GruParams(*[p.detach().clone() for p in self.tensors()])


def _gates(x, h, W_pz, W_pr, W_ph, W_hz, W_hr, W_hh, b_z, b_r, b_h):
    z = torch.sigmoid(x @ W_pz.T + h @ W_hz.T + b_z)
    r = torch.sigmoid(x @ W_pr.T + h @ W_hr.T + b_r)
    hc = torch.tanh(x @ W_ph.T + (r * h) @ W_hh.T + b_h)
    return z, r, hc


def gru_cell_step(x: Tensor, h_prev: Tensor, params: GruParams) -> Tensor:
    """One GRU update h = z * h_prev + (1 - z) * h_candidate."""
    if x.shape[-1] != N_FEATURES:
        raise ConfigurationError(f"Input has {x.shape[-1]} features, expected 4.")
    if h_prev.shape[-1] != params.hidden_size:
        raise ConfigurationError(
            f"Hidden state has size {h_prev.shape[-1]}, expected {params.hidden_size}."
        )
    z, _, hc = _gates(x, h_prev, *params.tensors()[:9])
    return z * h_prev + (1.0 - z) * hc


def _unroll(x, W_pz, W_pr, W_ph, W_hz, W_hr, W_hh, b_z, b_r, b_h):
    h = x.new_zeros(x.shape[0], W_hz.shape[0])
    hs, zs, rs, hcs = [h], [], [], []
    for k in range(x.shape[1]):
        z, r, hc = _gates(x[:, k], h, W_pz, W_pr, W_ph, W_hz, W_hr, W_hh, b_z, b_r, b_h)
        h = z * h + (1.0 - z) * hc
        hs.append(h)
        zs.append(z)
        rs.append(r)
        hcs.append(hc)
    return hs, zs, rs, hcs


class GRUSequence(Function):
    """GRU recurrence over a batch (B, T, 4) from a zero state.

    Returns the last hidden state (B, H). The backward pass recomputes the gate
    activations and runs backpropagation through time.
    """

    @staticmethod
    def forward(x, W_pz, W_pr, W_ph, W_hz, W_hr, W_hh, b_z, b_r, b_h):
        hs, _, _, _ = _unroll(x, W_pz, W_pr, W_ph, W_hz, W_hr, W_hh, b_z, b_r, b_h)
        return hs[-1]

    @staticmethod
    def setup_context(ctx, inputs, output):
        ctx.save_for_backward(*inputs)

    @staticmethod
    def backward(ctx, grad):
        x, W_pz, W_pr, W_ph, W_hz, W_hr, W_hh, b_z, b_r, b_h = ctx.saved_tensors
        hs, zs, rs, hcs = _unroll(
            x, W_pz, W_pr, W_ph, W_hz, W_hr, W_hh, b_z, b_r, b_h
        )

        dx = torch.zeros_like(x)
        dW_pz, dW_pr, dW_ph = (torch.zeros_like(W) for W in (W_pz, W_pr, W_ph))
        dW_hz, dW_hr, dW_hh = (torch.zeros_like(W) for W in (W_hz, W_hr, W_hh))
        db_z, db_r, db_h = (torch.zeros_like(b) for b in (b_z, b_r, b_h))

        g = grad
        for k in reversed(range(x.shape[1])):
            h, z, r, hc, xk = hs[k], zs[k], rs[k], hcs[k], x[:, k]

            # Pre-activation gradients of the update gate and the candidate
            da_z = g * (h - hc) * z * (1.0 - z)
            da_h = g * (1.0 - z) * (1.0 - hc**2)

            # Reset gate acts through r * h_prev
            d_rh = da_h @ W_hh
            da_r = d_rh * h * r * (1.0 - r)

            dW_pz += da_z.T @ xk
            dW_pr += da_r.T @ xk
            dW_ph += da_h.T @ xk
            dW_hz += da_z.T @ h
            dW_hr += da_r.T @ h
            dW_hh += da_h.T @ (r * h)
            db_z += da_z.sum(0)
            db_r += da_r.sum(0)
            db_h += da_h.sum(0)

            dx[:, k] = da_z @ W_pz + da_r @ W_pr + da_h @ W_ph
            g = g * z + d_rh * r + da_z @ W_hz + da_r @ W_hr

        return dx, dW_pz, dW_pr, dW_ph, dW_hz, dW_hr, dW_hh, db_z, db_r, db_h


gru_sequence = GRUSequence.apply


def network(x: Tensor, params: GruParams) -> Tensor:
    """Batched forward pass (B, T, 4) -> (B, 2)."""
    h = gru_sequence(x, *params.tensors()[:9])
    a = torch.tanh(h @ params.W_d.T + params.b_d)
    return a @ params.W_o.T + params.b_o


def forward(seq: Tensor, params: GruParams) -> Tensor:
    """Network output for a single (normalized) feature sequence."""
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise InsufficientHistoryError("insufficient history")
    return network(seq[None], params)[0]


@dataclass
class NormStats:
    """Feature standardization and output scaling fitted on a training set.

    Inputs are shifted by in_mean and divided by in_std (1 where the std is 0).
    Outputs are divided by their root-mean-square about zero so that a zero
    network output still means "no displacement".
    """

    in_mean: Tensor
    in_std: Tensor
    out_scale: Tensor

    @classmethod
    def fit(cls, sequences: Sequence[Tensor], targets: Tensor) -> "NormStats":
        x = torch.cat(list(sequences)).to(torch.float64)
        mean = x.mean(0)
        std = x.std(0, correction=0)
        std = torch.where(std > 1e-12 * mean.abs().clamp(min=1.0), std, 0.0)
        scale = targets.to(torch.float64).pow(2).mean(0).sqrt()
        scale = torch.where(scale > 0.0, scale, 1.0)
        return cls(mean, std, scale)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(
            torch.zeros(N_FEATURES, dtype=torch.float64),
            torch.ones(N_FEATURES, dtype=torch.float64),
            torch.ones(N_OUTPUTS, dtype=torch.float64),
        )

    @property
    def safe_std(self) -> Tensor:
        return torch.where(self.in_std > 0.0, self.in_std, 1.0)


def normalize_features(seq: Tensor, stats: NormStats) -> Tensor:
    return (seq - stats.in_mean) / stats.safe_std


def denormalize_features(seq: Tensor, stats: NormStats) -> Tensor:
    return seq * stats.safe_std + stats.in_mean


def normalize_output(displacement: Tensor, stats: NormStats) -> Tensor:
    return displacement / stats.out_scale


def denormalize_output(displacement: Tensor, stats: NormStats) -> Tensor:
    return displacement * stats.out_scale


@dataclass
class GruModel:
    params: GruParams
    stats: NormStats
    config: PredictorConfig

    @torch.no_grad()
    def displacement(self, seq: Tensor) -> Tensor:
        """Predicted (d_lon, d_lat) in degrees for a raw feature sequence."""
        y = forward(normalize_features(seq, self.stats), self.params)
        return denormalize_output(y, self.stats)


def build_dataset(
    trajectories: Sequence[Trajectory],
    window_len: int,
    horizon_steps: Sequence[int],
    align_rate: float,
) -> list[tuple[Tensor, Tensor]]:
    """Sliding-window samples (sequence, displacement) from aligned trajectories."""
    samples = []
    for traj in trajectories:
        for part in split_contiguous(traj, align_rate):
            n = len(part)
            for steps in horizon_steps:
                if n < window_len + steps + 1:
                    continue
                feats = featurize(part, steps * align_rate)
                for i in range(window_len, n - steps):
                    target = torch.stack(
                        [
                            part.lon[i + steps] - part.lon[i],
                            part.lat[i + steps] - part.lat[i],
                        ]
                    )
                    samples.append((feats[i - window_len : i], target))
    return samples


def train_bptt(
    dataset: Sequence[tuple[Tensor, Tensor]],
    cfg: PredictorConfig,
    verbose: bool = False,
) -> tuple[GruModel, list[float]]:
    """Fit the network with mini-batch Adam on the mean squared error."""
    if len(dataset) == 0:
        raise ValueError("Training dataset is empty.")
    seqs = [torch.as_tensor(s, dtype=torch.float64) for s, _ in dataset]
    if any(s.ndim != 2 or s.shape[0] == 0 for s in seqs):
        raise InsufficientHistoryError("insufficient history")
    targets = torch.stack([torch.as_tensor(t, dtype=torch.float64) for _, t in dataset])

    generator = torch.Generator().manual_seed(cfg.rng_seed)
    stats = NormStats.fit(seqs, targets)
    y = normalize_output(targets, stats)

    # Bucket samples by sequence length
    n = len(seqs)
    lengths = torch.tensor([len(s) for s in seqs])
    local = torch.zeros(n, dtype=torch.long)
    X, Y = {}, {}
    for L in sorted(set(lengths.tolist())):
        idx = torch.nonzero(lengths == L).ravel()
        local[idx] = torch.arange(len(idx))
        X[L] = torch.stack([normalize_features(seqs[i], stats) for i in idx.tolist()])
        Y[L] = y[idx]

    params = GruParams.init(cfg.hidden_size, cfg.dense_size, generator)
    leaves = [p.clone().requires_grad_(True) for p in params.tensors()]
    trainable = GruParams(*leaves)
    optimizer = torch.optim.Adam(
        leaves, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps_adam
    )

    losses = []
    progress = tqdm(range(cfg.epochs), desc="Training", disable=not verbose)
    for epoch in progress:
        perm = torch.randperm(n, generator=generator)
        total = 0.0
        for L in X:
            order = local[perm[lengths[perm] == L]]
            for batch in order.split(cfg.batch_size):
                optimizer.zero_grad()
                pred = network(X[L][batch], trainable)
                loss = torch.mean((pred - Y[L][batch]) ** 2)
                loss.backward()
                optimizer.step()
                total += loss.item() * len(batch)

        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise DivergenceError(f"Training diverged at epoch {epoch + 1}.")
        losses.append(epoch_loss)
        if verbose:
            progress.set_postfix(loss=f"{epoch_loss:.5e}")
        logger.debug("Epoch %d | Loss: %.5e", epoch + 1, epoch_loss)

    return GruModel(trainable.detach(), stats, cfg), losses


def _clamped_point(object_id: str, lon: float, lat: float, t: float) -> TimestampedPoint:
    return TimestampedPoint(
        object_id, min(max(lon, -180.0), 180.0), min(max(lat, -90.0), 90.0), t
    )


def constant_velocity_predict(traj: Trajectory, horizon: float) -> TimestampedPoint:
    """Extrapolate with the velocity of the last two points."""
    if len(traj) == 0:
        raise InsufficientHistoryError("insufficient history")
    last = traj.point(-1)
    if len(traj) == 1:
        return TimestampedPoint(last.object_id, last.lon, last.lat, last.t + horizon)
    dt = float(traj.t[-1] - traj.t[-2])
    v_lon = float(traj.lon[-1] - traj.lon[-2]) / dt
    v_lat = float(traj.lat[-1] - traj.lat[-2]) / dt
    return _clamped_point(
        last.object_id,
        last.lon + v_lon * horizon,
        last.lat + v_lat * horizon,
        last.t + horizon,
    )


def predict_location(traj: Trajectory, horizon: float, model: GruModel) -> TimestampedPoint:
    """Position at t_n + horizon; short histories use constant velocity."""
    if horizon <= 0.0:
        raise ValueError("Prediction horizon must be positive.")
    w = model.config.window_len
    if len(traj) < w + 1:
        logger.debug(
            "%s has %d aligned points, using constant velocity", traj.object_id, len(traj)
        )
        return constant_velocity_predict(traj, horizon)
    d = model.displacement(featurize(traj[-(w + 1) :], horizon))
    last = traj.point(-1)
    return _clamped_point(
        last.object_id, last.lon + float(d[0]), last.lat + float(d[1]), last.t + horizon
    )


class Predictor(ABC):
    """Future location of an object from its aligned history."""

    @property
    def history_len(self) -> int:
        """Number of most recent aligned points the predictor looks at."""
        return 2

    @abstractmethod
    def predict(self, traj: Trajectory, horizon: float) -> TimestampedPoint:
        pass


class ConstantVelocityPredictor(Predictor):
    def predict(self, traj: Trajectory, horizon: float) -> TimestampedPoint:
        return constant_velocity_predict(traj, horizon)


class GruPredictor(Predictor):
    def __init__(self, model: GruModel):
        self.model = model

    @property
    def history_len(self) -> int:
        return self.model.config.window_len + 1

    def predict(self, traj: Trajectory, horizon: float) -> TimestampedPoint:
        return predict_location(traj, horizon, self.model)


def save_model(model: GruModel, filename: str | PathLike):
    """Write parameters, normalization stats and config to a torch.save file."""
    torch.save(
        {
            "format": MODEL_FORMAT,
            "dims": {
                "n_features": N_FEATURES,
                "hidden_size": model.params.hidden_size,
                "dense_size": model.params.dense_size,
                "n_outputs": N_OUTPUTS,
            },
            "config": asdict(model.config),
            "params": model.params.as_dict(),
            "stats": asdict(model.stats),
        },
        filename,
    )


def load_model(filename: str | PathLike) -> GruModel:
    data = torch.load(filename, weights_only=True)
    if not isinstance(data, dict) or data.get("format") != MODEL_FORMAT:
        raise ConfigurationError(f"{filename} is not a {MODEL_FORMAT} model file.")
    params = GruParams.from_dict(data["params"])
    dims = data["dims"]
    if (dims["hidden_size"], dims["dense_size"]) != (
        params.hidden_size,
        params.dense_size,
    ):
        raise ConfigurationError("Model dimensions do not match its parameters.")
    config = PredictorConfig(**data["config"])
    if (config.hidden_size, config.dense_size) != (params.hidden_size, params.dense_size):
        raise ConfigurationError("Model config does not match its parameters.")
    stats = NormStats(**{k: torch.as_tensor(v) for k, v in data["stats"].items()})
    return GruModel(params, stats, config)
