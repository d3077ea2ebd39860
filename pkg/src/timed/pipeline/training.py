"""Three-stage training, generation and checkpoint state capture."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ..data import EcgSpec, Dataset, batch_iter, gen_ecg, gen_sines, load_csv_windowed
from ..diffusion import ddpm_loss, ddpm_loss_and_estimate, sample_loop
from ..losses import ar_loss, critic_loss, generator_w_term, mmd_rbf, total_loss
from ..networks import MaskedTransformer, refine
from ..numerics import AdamState, Rng, Tensor, adam_step, grad, no_grad, set_grad_enabled
from .checkpoint import CheckpointError, fingerprint_to_words, load_checkpoint, save_checkpoint, words_to_fingerprint
from .config import RunConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "stage", "epoch", "ddpm", "ar", "mmd", "w", "critic", "total"]
MODELS = ("denoiser", "supervisor", "critic")
EVAL_CHUNK = 256


class TrainingError(RuntimeError):
    pass


def build_dataset(config: RunConfig) -> Dataset:
    """The real dataset a config describes (deterministic in its seed)."""
    ds = config.dataset
    rng = Rng(config.seed).spawn(0)
    if ds.name == "sines":
        return gen_sines(ds.n, ds.t, ds.f, rng)
    if ds.name == "ecg":
        return gen_ecg(ds.n, ds.t, ds.f, EcgSpec(noise_std=ds.ecg_noise_std), rng)
    loaded = load_csv_windowed(ds.csv, ds.t, ds.stride, ds.columns, name=ds.name)
    if ds.n < len(loaded):
        loaded = loaded.subset(np.sort(rng.choice(len(loaded), ds.n)))
    return loaded


@contextlib.contextmanager
def frozen(model: MaskedTransformer):
    """Treat a model's weights as constants inside the block."""
    flags = {k: p.requires_grad for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]


def _finite(value: float, stage: int, term: str, step: int) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"stage {stage}: non-finite {term} loss at step {step}")
    return value


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


class Trainer:
    """Owns the three networks, their optimisers and the training rng."""

    def __init__(self, config: RunConfig, data: Dataset, out_dir: str | Path | None = None, omit: Iterable[str] = ()):
        self.config = config
        self.data = data
        self.samples = data.samples.astype(np.float32)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        # terms removed from the graph outright (used to verify ablation exactness)
        self.omit = frozenset(omit)
        root = Rng(config.seed)
        init_rng = root.spawn(1)
        self.rng = root.spawn(2)
        self.eval_rng_seed = root.spawn(3).seed
        tcfg = config.transformer(data.shape[2])
        masked = not config.ablation.disable_mask
        self.sched = config.schedule()
        self.models = {
            "denoiser": MaskedTransformer(tcfg, "denoiser", init_rng, T_diff=config.diffusion.T_diff, masked=masked),
            "supervisor": MaskedTransformer(tcfg, "supervisor", init_rng, masked=masked),
            "critic": MaskedTransformer(tcfg, "critic", init_rng, masked=masked),
        }
        self.opts = {k: AdamState.for_params(m.params, lr=config.lr) for k, m in self.models.items()}
        self.weights = config.loss_weights()
        self.progress = [0, 0, 0]
        self.step = 0
        self.log_rows: list[dict] = []

    # convenience -------------------------------------------------------------

    @property
    def denoiser(self) -> MaskedTransformer:
        return self.models["denoiser"]

    @property
    def supervisor(self) -> MaskedTransformer:
        return self.models["supervisor"]

    @property
    def critic(self) -> MaskedTransformer:
        return self.models["critic"]

    @property
    def use_supervisor(self) -> bool:
        return not self.config.ablation.disable_asl

    def _update(self, name: str, loss: Tensor) -> None:
        model = self.models[name]
        keys = list(model.params)
        grads = grad(loss, [model.params[k] for k in keys])
        adam_step(self.opts[name], model.params, dict(zip(keys, grads)))

    def _update_many(self, names: list[str], loss: Tensor) -> None:
        pairs = [(n, k) for n in names for k in self.models[n].params]
        grads = grad(loss, [self.models[n].params[k] for n, k in pairs])
        for n in names:
            gmap = {k: g for (m, k), g in zip(pairs, grads) if m == n}
            adam_step(self.opts[n], self.models[n].params, gmap)

    def _record(self, stage: int, epoch: int, **terms) -> dict:
        row = {"step": self.step, "stage": stage, "epoch": epoch}
        row.update({k: terms.get(k) for k in LOG_COLUMNS[3:]})
        self.log_rows.append(row)
        if self.out_dir is not None:
            path = self.out_dir / "train_log.csv"
            new = not path.exists()
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with path.open("a", newline="") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(LOG_COLUMNS)
                w.writerow([row["step"], stage, epoch] + [_fmt(row[k]) for k in LOG_COLUMNS[3:]])
        log.info("stage %d epoch %d: %s", stage, epoch, {k: v for k, v in terms.items() if v is not None})
        return row

    def _chunked_mean(self, fn: Callable[[np.ndarray], Tensor]) -> float:
        total, count = 0.0, 0
        with no_grad():
            for start in range(0, len(self.samples), EVAL_CHUNK):
                chunk = self.samples[start : start + EVAL_CHUNK]
                total += float(fn(chunk).item()) * len(chunk)
                count += len(chunk)
        return total / count

    # stages ------------------------------------------------------------------

    def stage1_loss(self, batch) -> Tensor:
        return ar_loss(self.supervisor, batch, batch, self.config.delta, "last_delta")

    def run_stage(self, stage: int, epochs: int | None = None) -> list[dict]:
        """Run ``stage`` until it has completed ``epochs`` epochs in total."""
        target = self.config.epochs[stage - 1] if epochs is None else epochs
        if stage == 1 and not self.use_supervisor:
            target = 0
        runner = {1: self._epoch_stage1, 2: self._epoch_stage2, 3: self._epoch_stage3}[stage]
        rows = []
        if self.progress[stage - 1] == 0 and stage in (1, 2) and target > 0:
            rows.append(self._record(stage, 0, **self._initial_terms(stage)))
        while self.progress[stage - 1] < target:
            epoch = self.progress[stage - 1] + 1
            with set_grad_enabled(True):
                terms = runner(epoch)
            self.progress[stage - 1] = epoch
            rows.append(self._record(stage, epoch, **terms))
            if self.out_dir is not None:
                self.save(self.out_dir / "resume.bin")
        if self.out_dir is not None:
            self.save(self.out_dir / f"stage{stage}.bin")
        return rows

    def _initial_terms(self, stage: int) -> dict:
        if stage == 1:
            return {"ar": self._chunked_mean(self.stage1_loss)}
        rng = Rng(self.eval_rng_seed)
        return {"ddpm": self._chunked_mean(lambda b: ddpm_loss(self.denoiser, b, self.sched, rng))}

    def _batches(self):
        return batch_iter(self.samples, min(self.config.batch_size, len(self.samples)), self.rng)

    def _epoch_stage1(self, epoch: int) -> dict:
        losses = []
        for xb in self._batches():
            loss = self.stage1_loss(xb)
            losses.append(_finite(loss.item(), 1, "ar", self.step))
            self._update("supervisor", loss)
            self.step += 1
        return {"ar": float(np.mean(losses))}

    def _epoch_stage2(self, epoch: int) -> dict:
        losses = []
        for xb in self._batches():
            loss = ddpm_loss(self.denoiser, xb, self.sched, self.rng)
            losses.append(_finite(loss.item(), 2, "ddpm", self.step))
            self._update("denoiser", loss)
            self.step += 1
        return {"ddpm": float(np.mean(losses))}

    def joint_step(self, xb: np.ndarray) -> dict:
        """One stage-3 update: critic first, then denoiser and supervisor together."""
        cfg, w = self.config, self.weights
        x_real = Tensor(xb)
        l_ddpm, x0_hat = ddpm_loss_and_estimate(self.denoiser, x_real, self.sched, self.rng)
        x_fake = refine(self.supervisor, x0_hat, cfg.delta) if self.use_supervisor else x0_hat

        use_critic = "w" not in self.omit and not cfg.ablation.disable_wc
        critic_vals = []
        if use_critic:
            fake_const = x_fake.detach()
            for _ in range(cfg.critic_updates_per_step):
                lc = critic_loss(self.critic, x_real, fake_const, w.gp_lambda, self.rng)
                critic_vals.append(_finite(lc.item(), 3, "critic", self.step))
                self._update("critic", lc)

        parts = {"ddpm": l_ddpm}
        if self.use_supervisor and "ar" not in self.omit:
            parts["ar"] = ar_loss(self.supervisor, x_real, x0_hat, cfg.delta, "full")
        if "mmd" not in self.omit:
            # logged even at zero weight; total_loss leaves it out of the update
            parts["mmd"] = mmd_rbf(x_real, x_fake, cfg.weights.mmd_sigma)
        if use_critic and w.lambda_w > 0:
            with frozen(self.critic):
                parts["w"] = generator_w_term(self.critic, x_fake)
        total = total_loss(parts, w)
        values = {k: _finite(v.item(), 3, k, self.step) for k, v in parts.items()}
        values["total"] = _finite(total.item(), 3, "total", self.step)
        gen = ["denoiser", "supervisor"] if self.use_supervisor else ["denoiser"]
        self._update_many(gen, total)
        if critic_vals:
            values["critic"] = float(np.mean(critic_vals))
        self.step += 1
        return values

    def _epoch_stage3(self, epoch: int) -> dict:
        acc: dict[str, list[float]] = {}
        for xb in self._batches():
            for k, v in self.joint_step(xb).items():
                acc.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def train(self, stages=(1, 2, 3)) -> None:
        for s in stages:
            self.run_stage(s)

    # generation ----------------------------------------------------------------

    def generate(self, n: int, rng: Rng, batch: int = 256, denormalize: bool = False) -> np.ndarray:
        """Reverse-diffuse ``n`` sequences, refine with the supervisor, clip to [0, 1]."""
        T, F = self.samples.shape[1], self.samples.shape[2]
        out = []
        with no_grad():
            for start in range(0, n, batch):
                b = min(batch, n - start)
                x0 = sample_loop(self.denoiser, self.sched, (b, T, F), rng)
                x = refine(self.supervisor, x0, self.config.delta) if self.use_supervisor else x0
                out.append(np.clip(x.data, 0.0, 1.0))
        samples = np.concatenate(out) if out else np.zeros((0, T, F), np.float32)
        if denormalize:
            lo, hi = self.data.stats
            samples = samples * (hi - lo) + lo
        return samples.astype(np.float32) if not denormalize else samples

    # state capture ---------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        st: dict[str, np.ndarray] = {
            "meta/fingerprint": fingerprint_to_words(self.config.fingerprint()),
            "meta/progress": np.array(self.progress, dtype=np.float32),
            "meta/step": np.array([self.step], dtype=np.float32),
            "schedule/betas": self.sched.betas.astype(np.float32),
            "rng/train": self.rng.get_state().astype(np.float32),
            "data/min": np.asarray(self.data.stats[0], dtype=np.float32),
            "data/max": np.asarray(self.data.stats[1], dtype=np.float32),
        }
        for name in MODELS:
            for k, p in self.models[name].params.items():
                st[f"model/{name}/{k}"] = p.data
        for name in MODELS:
            opt = self.opts[name]
            st[f"opt/{name}/step"] = np.array([opt.step], dtype=np.float32)
            for k in self.models[name].params:
                st[f"opt/{name}/m/{k}"] = opt.m[k]
                st[f"opt/{name}/v/{k}"] = opt.v[k]
        return st

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        fp = words_to_fingerprint(st["meta/fingerprint"])
        if fp != self.config.fingerprint():
            raise CheckpointError(f"checkpoint fingerprint {fp} does not match config fingerprint {self.config.fingerprint()}")
        try:
            for name in MODELS:
                for k, p in self.models[name].params.items():
                    p.data = np.array(st[f"model/{name}/{k}"], dtype=p.data.dtype).reshape(p.data.shape)
                opt = self.opts[name]
                opt.step = int(st[f"opt/{name}/step"][0])
                for k in self.models[name].params:
                    opt.m[k] = np.array(st[f"opt/{name}/m/{k}"], dtype=np.float32)
                    opt.v[k] = np.array(st[f"opt/{name}/v/{k}"], dtype=np.float32)
            self.rng.set_state(st["rng/train"])
            self.progress = [int(x) for x in st["meta/progress"]]
            self.step = int(st["meta/step"][0])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing tensor {exc.args[0]!r}") from None

    def save(self, path) -> None:
        save_checkpoint(path, self.state())

    @classmethod
    def from_checkpoint(cls, path, config: RunConfig, data: Dataset, out_dir=None) -> "Trainer":
        trainer = cls(config, data, out_dir=out_dir)
        trainer.load_state(load_checkpoint(path))
        return trainer


def truncate_log(path, progress) -> None:
    """Drop log rows written after the epoch a checkpoint captured."""
    path = Path(path)
    if not path.exists():
        return
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if 0 < progress[int(r[1]) - 1] >= int(r[2])]
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def generate(config: RunConfig, checkpoint, n: int, rng: Rng, data: Dataset | None = None, denormalize: bool = False) -> Dataset:
    """Synthetic dataset from a saved model."""
    data = data if data is not None else build_dataset(config)
    trainer = Trainer.from_checkpoint(checkpoint, config, data)
    samples = trainer.generate(n, rng, denormalize=denormalize)
    return Dataset(samples, f"{data.name}-synthetic", list(data.feature_names), data.stats)
