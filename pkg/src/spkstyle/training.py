"""Alternating optimization: each encoder/decoder/classifier update is
followed by a configurable number of exclusive adversarial updates, every
update on a freshly sampled batch.

The backward pass is orchestrated by hand.  During the main step the
adversarial modules contribute gradients to the encoders through the
reversal layer while their own parameters stay frozen; during adversarial
steps the encoders run inference-only (nothing is cached, so their inputs
are detached by construction) and only the adversarial parameters move.

Sequential execution with a fixed backend is bit-reproducible: the single
generator drives batch sampling, augmentation, and reparameterization noise
in a fixed order, and its state rides along in every checkpoint.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError, DataError, TrainingDiverged
from .features import instance_normalize, read_features, read_manifest, resolve_path, validate_manifest, vtlp
from .losses import (
    LossBreakdown,
    LossWeights,
    cpc_loss_grad,
    cross_entropy_logits_grad,
    gradient_reversal,
    gradient_reversal_vjp,
    kld_loss_grad,
    total_loss,
    xsigmoid_loss_grad,
)
from .model import (
    ADV_GROUPS,
    MAIN_GROUPS,
    DisenModel,
    load_checkpoint,
    sample_content,
    save_checkpoint,
)
from .nn import Adam, global_average_pool, global_average_pool_backward

log = logging.getLogger(__name__)

LOSS_CSV_FIELDS = ("iteration",) + LossBreakdown.FIELDS


@dataclass
class Dataset:
    """In-memory feature corpus with a fixed speaker inventory."""

    features: list[np.ndarray]
    labels: np.ndarray
    speaker_ids: list[str]
    utterance_ids: list[str]

    def __len__(self) -> int:
        return len(self.features)


def load_dataset(manifest_path, min_frames: int | None = None) -> Dataset:
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    if not records:
        raise DataError(f"empty manifest {manifest_path}")
    validate_manifest(records, manifest_path.parent)
    speakers = sorted({r["speaker_id"] for r in records})
    feats, labels, ids, short = [], [], [], []
    index = {s: i for i, s in enumerate(speakers)}
    for rec in records:
        fs = read_features(resolve_path(rec, manifest_path.parent))
        if min_frames is not None and fs.n_frames < min_frames:
            short.append(rec["utterance_id"])
        feats.append(fs.values)
        labels.append(index[rec["speaker_id"]])
        ids.append(rec["utterance_id"])
    if short:
        raise DataError(f"{len(short)} utterances shorter than the {min_frames}-frame crop: {short[:5]}")
    return Dataset(features=feats, labels=np.array(labels), speaker_ids=speakers, utterance_ids=ids)


@dataclass
class TrainingBatch:
    """Cropped raw features, their content-branch augmented twins, labels."""

    x: np.ndarray  # (B, T', F)
    x_aug: np.ndarray  # (B, T', F) warped + instance-normalized
    labels: np.ndarray  # (B,)
    utterance_ids: list[str]


def make_batch(
    ds: Dataset,
    rng: np.random.Generator,
    batch_size: int,
    crop: int,
    vtlp_range: tuple[float, float],
    norm_eps: float,
    dtype,
) -> TrainingBatch:
    """Sample distinct utterances, crop to a common length, and augment the
    content-branch copy per utterance."""
    if batch_size > len(ds):
        raise DataError(f"batch size {batch_size} exceeds corpus size {len(ds)}")
    picks = rng.choice(len(ds), size=batch_size, replace=False)
    xs = np.empty((batch_size, crop, ds.features[0].shape[1]), dtype=dtype)
    xa = np.empty_like(xs)
    for i, j in enumerate(picks):
        full = ds.features[j]
        start = int(rng.integers(0, full.shape[0] - crop + 1))
        piece = full[start : start + crop].astype(dtype)
        alpha = float(rng.uniform(*vtlp_range))
        xs[i] = piece
        xa[i] = instance_normalize(vtlp(piece, alpha), eps=norm_eps)
    return TrainingBatch(
        x=xs, x_aug=xa, labels=ds.labels[picks], utterance_ids=[ds.utterance_ids[j] for j in picks]
    )


@dataclass
class TrainState:
    model: DisenModel
    opt_main: Adam
    opt_adv: Adam
    rng: np.random.Generator
    iteration: int = 0


def build_state(run_config: RunConfig, n_mels: int, n_speakers: int, seed: int, freeze=()) -> TrainState:
    freeze = tuple(freeze)
    for name in freeze:
        if name not in MAIN_GROUPS + ADV_GROUPS:
            raise ConfigError(f"unknown parameter group in freeze list: {name!r}")
    model = DisenModel(run_config.model, n_mels, n_speakers, seed=seed)
    tc = run_config.train
    opt_main = Adam(
        model.group_params([g for g in MAIN_GROUPS if g not in freeze]),
        lr=tc.learning_rate,
        beta1=tc.adam_beta1,
        beta2=tc.adam_beta2,
        eps=tc.adam_eps,
    )
    opt_adv = Adam(
        model.group_params([g for g in ADV_GROUPS if g not in freeze]),
        lr=tc.learning_rate,
        beta1=tc.adam_beta1,
        beta2=tc.adam_beta2,
        eps=tc.adam_eps,
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 4])))
    return TrainState(model=model, opt_main=opt_main, opt_adv=opt_adv, rng=rng)


def main_step(state: TrainState, batch: TrainingBatch, weights: LossWeights, tau: int) -> LossBreakdown:
    """One gradient step on encoders, decoder, and the speaker classifier.

    The adversarial groups stay frozen; they only shape encoder gradients
    through the reversal layer.  If any loss term is non-finite the update is
    skipped and the breakdown returned for the caller's divergence policy.
    """
    model = state.model
    model.zero_grad()
    x, x_aug, y = batch.x, batch.x_aug, batch.labels
    b, t, _ = x.shape
    emb = model.cfg.emb_dim

    s = model.enc_utt.forward(x, train=True)
    s_spk = model.enc_spk.forward(s, train=True)
    s_sty = model.enc_sty.forward(s, train=True)
    logits_spk = model.clf_spk.forward(s_spk, train=True)
    logits_sty = model.adv_clf_spk.forward(gradient_reversal(s_sty), train=True)
    mu, log_sigma = model.enc_cont.forward(x_aug, train=True)
    eps = state.rng.standard_normal(mu.shape).astype(mu.dtype)
    z = sample_content(mu, log_sigma, eps)
    tau_z = model.tau_z(tau)
    adv_cpc_active = z.shape[1] > tau_z
    if adv_cpc_active:
        proj = model.adv_cpc_head.forward(gradient_reversal(z), train=True)
    else:
        log.warning("content sequence length %d <= lag %d; adversarial term skipped", z.shape[1], tau_z)
    spk_bar = global_average_pool(s_spk)
    sty_bar = global_average_pool(s_sty)
    xhat_full = model.dec.forward(model.decoder_input(spk_bar, sty_bar, z), train=True)
    xhat = xhat_full[:, :t, :]

    rec, g_xhat = xsigmoid_loss_grad(xhat, x)
    cpc_s, g_s_cpc = cpc_loss_grad(s, tau)
    kld, g_mu_kld, g_ls_kld = kld_loss_grad(mu, log_sigma)
    if adv_cpc_active:
        adv_cpc, g_proj = cpc_loss_grad(proj, tau_z)
    else:
        adv_cpc, g_proj = 0.0, None
    ce_spk, g_logits_spk = cross_entropy_logits_grad(logits_spk, y)
    adv_ce, g_logits_sty = cross_entropy_logits_grad(logits_sty, y)
    breakdown = total_loss(rec, cpc_s, kld, adv_cpc, ce_spk, adv_ce, weights)
    if not breakdown.finite():
        bad = [k for k, v in breakdown.as_dict().items() if not np.isfinite(v)]
        log.warning("non-finite loss terms %s at iteration %d; update skipped", bad, state.iteration)
        state.iteration += 1
        return breakdown

    g_dec_out = np.zeros_like(xhat_full)
    g_dec_out[:, :t, :] = g_xhat
    g_dec_in = model.dec.backward(g_dec_out)
    g_spk_bar = g_dec_in[:, :, :emb].sum(axis=1)
    g_sty_bar = g_dec_in[:, :, emb : 2 * emb].sum(axis=1)
    g_z = g_dec_in[:, :, 2 * emb :].copy()
    if adv_cpc_active:
        g_z_head = model.adv_cpc_head.backward(weights.lambda_z * g_proj)
        g_z += gradient_reversal_vjp(g_z_head)
    g_mu = g_z + weights.beta * g_mu_kld
    g_ls = g_z * (np.exp(log_sigma) * eps) + weights.beta * g_ls_kld
    model.enc_cont.backward(g_mu, g_ls)

    g_s_spk = model.clf_spk.backward(g_logits_spk) + global_average_pool_backward(g_spk_bar, t)
    g_s_sty = gradient_reversal_vjp(model.adv_clf_spk.backward(g_logits_sty))
    g_s_sty += global_average_pool_backward(g_sty_bar, t)
    g_s = weights.lambda_s * g_s_cpc
    g_s += model.enc_spk.backward(g_s_spk)
    g_s += model.enc_sty.backward(g_s_sty)
    model.enc_utt.backward(g_s)

    state.opt_main.step()
    state.iteration += 1
    return breakdown


def adversarial_step(state: TrainState, batch: TrainingBatch, tau: int) -> tuple[float, float]:
    """One gradient step on the adversarial classifier and contrastive head,
    minimizing their objectives on detached embeddings.  Encoders run
    inference-only, so no gradient can reach them."""
    model = state.model
    model.zero_grad()
    s = model.enc_utt.forward(batch.x, train=False)
    s_sty = model.enc_sty.forward(s, train=False)
    mu, log_sigma = model.enc_cont.forward(batch.x_aug, train=False)
    eps = state.rng.standard_normal(mu.shape).astype(mu.dtype)
    z = sample_content(mu, log_sigma, eps)

    logits = model.adv_clf_spk.forward(s_sty, train=True)
    ce, g_logits = cross_entropy_logits_grad(logits, batch.labels)
    model.adv_clf_spk.backward(g_logits)

    tau_z = model.tau_z(tau)
    head_cpc = 0.0
    if z.shape[1] > tau_z:
        proj = model.adv_cpc_head.forward(z, train=True)
        head_cpc, g_proj = cpc_loss_grad(proj, tau_z)
        model.adv_cpc_head.backward(g_proj)
    if np.isfinite(ce) and np.isfinite(head_cpc):
        state.opt_adv.step()
    else:
        log.warning("non-finite adversarial losses (ce=%g, cpc=%g); update skipped", ce, head_cpc)
    return float(ce), float(head_cpc)


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state_dict: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state_dict
    return rng


def _dump_diagnostics(out_dir: Path, state: TrainState, history: list[LossBreakdown]) -> Path:
    path = out_dir / "divergence.json"
    info = {
        "iteration": state.iteration,
        "recent_losses": [bd.as_dict() for bd in history],
        "param_norms": {
            group: float(sum(np.linalg.norm(p.value) for p in params))
            for group, params in state.model.groups.items()
        },
    }
    path.write_text(json.dumps(info, indent=2))
    return path


def fit(
    run_config: RunConfig,
    manifest_path,
    out_dir,
    seed: int = 0,
    *,
    init_checkpoint=None,
    resume_checkpoint=None,
    freeze=(),
    log_every: int = 0,
) -> Path:
    """Train to ``run_config.train.iterations`` and return the final
    checkpoint path.

    ``resume_checkpoint`` restores parameters, optimizer moments, generator
    state, and the iteration counter for bit-exact continuation.
    ``init_checkpoint`` loads parameters only (the pretrain/fine-tune hook),
    optionally with ``freeze`` listing parameter groups to exclude from
    updates.
    """
    run_config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc, lc = run_config.train, run_config.loss
    ds = load_dataset(manifest_path, min_frames=tc.crop_frames)
    if len(ds.speaker_ids) < 2:
        raise DataError(
            "training requires at least 2 speakers: the contrastive loss draws "
            "its negatives from other utterances in the batch"
        )
    weights = LossWeights(lambda_s=lc.lambda_s, lambda_z=lc.lambda_z, beta=lc.beta)
    dtype = np.dtype(run_config.model.dtype)
    n_mels = ds.features[0].shape[1]

    if resume_checkpoint is not None:
        model, ckpt_cfg, meta, raw = load_checkpoint(resume_checkpoint)
        state = build_state(run_config, n_mels, model.n_speakers, seed, freeze=freeze)
        state.model = model
        state.opt_main = Adam(
            model.group_params([g for g in MAIN_GROUPS if g not in freeze]),
            lr=tc.learning_rate, beta1=tc.adam_beta1, beta2=tc.adam_beta2, eps=tc.adam_eps,
        )
        state.opt_adv = Adam(
            model.group_params([g for g in ADV_GROUPS if g not in freeze]),
            lr=tc.learning_rate, beta1=tc.adam_beta1, beta2=tc.adam_beta2, eps=tc.adam_eps,
        )
        state.opt_main.load_state_arrays("opt_main", raw)
        state.opt_adv.load_state_arrays("opt_adv", raw)
        state.rng = _restore_rng(meta["rng_state"])
        state.iteration = meta["iteration"]
        if meta["speaker_ids"] and meta["speaker_ids"] != ds.speaker_ids:
            raise DataError("resume checkpoint speaker inventory does not match the manifest")
    else:
        state = build_state(run_config, n_mels, len(ds.speaker_ids), seed, freeze=freeze)
        if init_checkpoint is not None:
            init_model, _, _, _ = load_checkpoint(init_checkpoint)
            for group, params in state.model.groups.items():
                for p, q in zip(params, init_model.groups[group]):
                    if p.value.shape != q.value.shape:
                        raise ConfigError(f"init checkpoint shape mismatch in group {group}")
                    p.value[...] = q.value

    def checkpoint(path: Path) -> Path:
        extra = state.opt_main.state_arrays("opt_main")
        extra.update(state.opt_adv.state_arrays("opt_adv"))
        save_checkpoint(
            path,
            state.model,
            run_config,
            iteration=state.iteration,
            speaker_ids=ds.speaker_ids,
            rng_state=_rng_state(state.rng),
            extra_arrays=extra,
        )
        return path

    csv_path = out_dir / "losses.csv"
    mode = "a" if (resume_checkpoint is not None and csv_path.exists()) else "w"
    vtlp_range = (run_config.features.vtlp_min, run_config.features.vtlp_max)
    nonfinite_streak = 0
    history: list[LossBreakdown] = []
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOSS_CSV_FIELDS)
        while state.iteration < tc.iterations:
            batch = make_batch(ds, state.rng, tc.batch_size, tc.crop_frames, vtlp_range,
                               run_config.features.norm_eps, dtype)
            bd = main_step(state, batch, weights, lc.tau_frames)
            history = (history + [bd])[-5:]
            if not bd.finite():
                nonfinite_streak += 1
                if nonfinite_streak >= 2:
                    dump = _dump_diagnostics(out_dir, state, history)
                    checkpoint(out_dir / "checkpoint_diverged.npz")
                    raise TrainingDiverged(
                        f"total loss non-finite twice consecutively at iteration "
                        f"{state.iteration}; diagnostics in {dump}"
                    )
            else:
                nonfinite_streak = 0
            for _ in range(tc.adv_updates):
                adv_batch = make_batch(ds, state.rng, tc.batch_size, tc.crop_frames, vtlp_range,
                                       run_config.features.norm_eps, dtype)
                adversarial_step(state, adv_batch, lc.tau_frames)
            writer.writerow([state.iteration] + [f"{bd.as_dict()[k]:.8g}" for k in LossBreakdown.FIELDS])
            if log_every and state.iteration % log_every == 0:
                log.info("iter %d: %s", state.iteration,
                         " ".join(f"{k}={v:.4f}" for k, v in bd.as_dict().items()))
            if tc.checkpoint_interval and state.iteration % tc.checkpoint_interval == 0:
                checkpoint(out_dir / f"checkpoint_{state.iteration:06d}.npz")
    return checkpoint(out_dir / "checkpoint_final.npz")
