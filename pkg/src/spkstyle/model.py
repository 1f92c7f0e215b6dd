"""The disentanglement network: four encoders, two speaker classifiers, an
adversarial contrastive head, pooling, and the decoder.

Data flow (training):

    X --------> utterance encoder --> S (B, T, utt_dim)
    S --> speaker encoder --> S_spk --> frame classifier (speaker labels)
    S --> style encoder   --> S_sty --> reversal --> adversarial classifier
    warp+norm(X) --> content encoder --> (mu, log_sigma), N = ceil(T / d)
    z = mu + sigma * eps --> reversal --> contrastive head
    decode(pool(S_spk), pool(S_sty), z) --> X_hat (B, N * d, F)

Time resolution is preserved everywhere except the content path, which
downsamples by the configured power-of-two factor through strided
convolutions (ceil semantics); the decoder restores it with transposed
convolutions and the output is cropped back to the input length.

Every trainable parameter belongs to exactly one named group; the partition
is asserted at build time because the alternating training schedule relies
on it.
"""

from __future__ import annotations

import json

import numpy as np

from .config import ModelConfig, RunConfig, config_from_string, config_to_string
from .errors import ConfigError, NumericError, ParameterError
from .losses import softmax
from .nn import Adam, Conv1d, ConvTranspose1d, Layer, LeakyReLU, Linear, Param, Sequential
from .nn import global_average_pool, global_average_pool_backward

CHECKPOINT_VERSION = 1

ENCODER_GROUPS = ("enc_utt", "enc_spk", "enc_sty", "enc_cont")
MAIN_GROUPS = ENCODER_GROUPS + ("dec", "clf_spk")
ADV_GROUPS = ("adv_clf_spk", "adv_cpc_head")
ALL_GROUPS = MAIN_GROUPS + ADV_GROUPS


def _conv_stack(c_in, hidden, c_out, n_layers, kernel, slope, rng, dtype, name):
    dims = [c_in] + [hidden] * (n_layers - 1) + [c_out]
    layers = []
    for i in range(n_layers):
        layers.append(Conv1d(dims[i], dims[i + 1], kernel, rng=rng, dtype=dtype, name=f"{name}{i}"))
        if i < n_layers - 1:
            layers.append(LeakyReLU(slope))
    return Sequential(layers)


class ContentEncoder(Layer):
    """Strided conv stack emitting per-frame diagonal-Gaussian parameters."""

    def __init__(self, c_in, hidden, dz, downsample, kernel, slope, *, rng, dtype):
        n_strided = int(downsample).bit_length() - 1
        layers = []
        c = c_in
        for i in range(n_strided):
            layers.append(Conv1d(c, hidden, kernel, stride=2, rng=rng, dtype=dtype, name=f"cont{i}"))
            layers.append(LeakyReLU(slope))
            c = hidden
        layers.append(Conv1d(c, hidden, kernel, rng=rng, dtype=dtype, name=f"cont{n_strided}"))
        layers.append(LeakyReLU(slope))
        self.body = Sequential(layers)
        self.mu_head = Linear(hidden, dz, rng=rng, dtype=dtype, name="cont_mu")
        self.ls_head = Linear(hidden, dz, rng=rng, dtype=dtype, name="cont_ls")

    def params(self):
        return self.body.params() + self.mu_head.params() + self.ls_head.params()

    def forward(self, x, train=True):
        h = self.body.forward(x, train=train)
        return self.mu_head.forward(h, train=train), self.ls_head.forward(h, train=train)

    def backward(self, g_mu, g_ls):
        gh = self.mu_head.backward(g_mu) + self.ls_head.backward(g_ls)
        return self.body.backward(gh)


class Decoder(Layer):
    """Mirror of the content path: transposed convs upsample N back to N*d."""

    def __init__(self, in_dim, hidden, n_mels, downsample, kernel, slope, *, rng, dtype):
        n_up = int(downsample).bit_length() - 1
        layers = [Conv1d(in_dim, hidden, kernel, rng=rng, dtype=dtype, name="dec_in"), LeakyReLU(slope)]
        for i in range(n_up):
            layers.append(ConvTranspose1d(hidden, hidden, rng=rng, dtype=dtype, name=f"dec_up{i}"))
            layers.append(LeakyReLU(slope))
        layers.append(Conv1d(hidden, n_mels, kernel, rng=rng, dtype=dtype, name="dec_out"))
        self.body = Sequential(layers)

    def params(self):
        return self.body.params()

    def forward(self, x, train=True):
        return self.body.forward(x, train=train)

    def backward(self, gy):
        return self.body.backward(gy)


def sample_content(mu: np.ndarray, log_sigma: np.ndarray, noise) -> np.ndarray:
    """Reparameterized draw mu + sigma * noise; noise 0 returns the mean."""
    return mu + np.exp(log_sigma) * noise


class DisenModel:
    """Bundle of all trainable modules plus the parameter-group partition."""

    def __init__(self, mcfg: ModelConfig, n_mels: int, n_speakers: int, seed: int = 0):
        if n_speakers < 1:
            raise ConfigError("model needs a speaker inventory of at least 1")
        self.cfg = mcfg
        self.n_mels = n_mels
        self.n_speakers = n_speakers
        dtype = np.dtype(mcfg.dtype)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 3])))
        k, slope = mcfg.kernel_size, mcfg.leaky_slope

        self.enc_utt = _conv_stack(
            n_mels, mcfg.utt_hidden, mcfg.utt_dim, mcfg.utt_layers, k, slope, rng, dtype, "utt"
        )
        self.enc_spk = _conv_stack(mcfg.utt_dim, mcfg.se_hidden, mcfg.emb_dim, 3, k, slope, rng, dtype, "spk")
        self.enc_sty = _conv_stack(mcfg.utt_dim, mcfg.se_hidden, mcfg.emb_dim, 3, k, slope, rng, dtype, "sty")
        self.enc_cont = ContentEncoder(
            n_mels, mcfg.content_hidden, mcfg.content_dim, mcfg.downsample, k, slope, rng=rng, dtype=dtype
        )
        self.dec = Decoder(
            2 * mcfg.emb_dim + mcfg.content_dim,
            mcfg.dec_hidden,
            n_mels,
            mcfg.downsample,
            k,
            slope,
            rng=rng,
            dtype=dtype,
        )
        self.clf_spk = Sequential([Linear(mcfg.emb_dim, n_speakers, rng=rng, dtype=dtype, name="clf")])
        self.adv_clf_spk = Sequential(
            [
                Linear(mcfg.emb_dim, mcfg.adv_hidden, rng=rng, dtype=dtype, name="adv0"),
                LeakyReLU(slope),
                Linear(mcfg.adv_hidden, mcfg.adv_hidden, rng=rng, dtype=dtype, name="adv1"),
                LeakyReLU(slope),
                Linear(mcfg.adv_hidden, n_speakers, rng=rng, dtype=dtype, name="adv2"),
            ]
        )
        self.adv_cpc_head = Sequential(
            [
                Conv1d(mcfg.content_dim, mcfg.cpc_head_hidden, k, rng=rng, dtype=dtype, name="head0"),
                LeakyReLU(slope),
                Conv1d(mcfg.cpc_head_hidden, mcfg.cpc_head_dim, k, rng=rng, dtype=dtype, name="head1"),
            ]
        )
        self.groups: dict[str, list[Param]] = {
            "enc_utt": self.enc_utt.params(),
            "enc_spk": self.enc_spk.params(),
            "enc_sty": self.enc_sty.params(),
            "enc_cont": self.enc_cont.params(),
            "dec": self.dec.params(),
            "clf_spk": self.clf_spk.params(),
            "adv_clf_spk": self.adv_clf_spk.params(),
            "adv_cpc_head": self.adv_cpc_head.params(),
        }
        self._assert_partition()

    def _assert_partition(self):
        seen: set[int] = set()
        for group in ALL_GROUPS:
            for p in self.groups[group]:
                if id(p) in seen:
                    raise ConfigError(f"parameter {p.name} assigned to more than one group")
                seen.add(id(p))
        everything = {id(p) for p in self.parameters()}
        if seen != everything:
            raise ConfigError("parameter groups do not cover all trainable parameters")

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Param]:
        out = []
        for group in ALL_GROUPS:
            out.extend(self.groups[group])
        return out

    def group_params(self, names) -> list[Param]:
        out = []
        for name in names:
            out.extend(self.groups[name])
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    # -- forward pieces -----------------------------------------------------

    def _check_finite(self, x):
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite values in encoder input")

    def frame_embeddings(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Utterance-level frame embeddings S, same time resolution as x."""
        self._check_finite(x)
        return self.enc_utt.forward(x, train=train)

    def speaker_frames(self, s: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_finite(s)
        return self.enc_spk.forward(s, train=train)

    def style_frames(self, s: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_finite(s)
        return self.enc_sty.forward(s, train=train)

    def content_posterior(self, x_aug: np.ndarray, train: bool = False):
        """Per-frame (mu, log_sigma); N = ceil(T / downsample)."""
        self._check_finite(x_aug)
        return self.enc_cont.forward(x_aug, train=train)

    def cpc_projection(self, z: np.ndarray, train: bool = False) -> np.ndarray:
        return self.adv_cpc_head.forward(z, train=train)

    def speaker_logits(self, s_spk: np.ndarray, train: bool = False) -> np.ndarray:
        return self.clf_spk.forward(s_spk, train=train)

    def adv_speaker_logits(self, s_sty: np.ndarray, train: bool = False) -> np.ndarray:
        return self.adv_clf_spk.forward(s_sty, train=train)

    def speaker_probabilities(self, s_spk: np.ndarray) -> np.ndarray:
        """Frame-wise class posterior over the speaker inventory."""
        return softmax(self.speaker_logits(s_spk, train=False), axis=-1)

    def adversarial_speaker_probabilities(self, s_sty: np.ndarray) -> np.ndarray:
        """Forward pass of the adversarial classifier (reversal acts only on
        gradients, so this is a plain classifier at inference)."""
        return softmax(self.adv_speaker_logits(s_sty, train=False), axis=-1)

    def decoder_input(self, spk_vec: np.ndarray, sty_vec: np.ndarray, z: np.ndarray) -> np.ndarray:
        n = z.shape[1]
        tiled_spk = np.repeat(spk_vec[:, None, :], n, axis=1)
        tiled_sty = np.repeat(sty_vec[:, None, :], n, axis=1)
        return np.concatenate([tiled_spk, tiled_sty, z], axis=-1)

    def decode(self, spk_vec, sty_vec, z, out_len: int | None = None, train: bool = False) -> np.ndarray:
        """Tile the pooled embeddings along time, concatenate with the content
        codes, and decode; output cropped to ``out_len`` frames if given."""
        expected = 2 * self.cfg.emb_dim + self.cfg.content_dim
        u = self.decoder_input(spk_vec, sty_vec, z)
        if u.shape[-1] != expected:
            raise ConfigError(f"decoder input width {u.shape[-1]}, expected {expected}")
        y = self.dec.forward(u, train=train)
        if out_len is not None:
            if out_len > y.shape[1]:
                raise ParameterError(f"cannot crop decoder output {y.shape[1]} to {out_len}")
            y = y[:, :out_len, :]
        return y

    def tau_z(self, tau_frames: int) -> int:
        """Contrastive time lag on the downsampled content sequence."""
        return tau_frames // self.cfg.downsample

    # -- whole-utterance helpers -------------------------------------------

    def pooled_embedding(self, x: np.ndarray, which: str) -> np.ndarray:
        """Time-averaged embedding of a single (T, F) utterance.

        ``which`` selects the stream: ``before_disen`` (utterance-level),
        ``speaker``, or ``style``.
        """
        if which not in ("before_disen", "speaker", "style"):
            raise ParameterError(f"unknown embedding stream {which!r}")
        s = self.frame_embeddings(x[None].astype(self.cfg.dtype), train=False)
        if which == "speaker":
            s = self.speaker_frames(s, train=False)
        elif which == "style":
            s = self.style_frames(s, train=False)
        return global_average_pool(s)[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    model: DisenModel,
    run_config: RunConfig,
    *,
    iteration: int = 0,
    speaker_ids: list[str] | None = None,
    rng_state: dict | None = None,
    extra_arrays: dict | None = None,
) -> None:
    """Versioned single-file container: parameters, config echo, counters,
    generator state, and any optimizer arrays the trainer wants alongside."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_string(run_config),
        "n_mels": model.n_mels,
        "n_speakers": model.n_speakers,
        "speaker_ids": list(speaker_ids or []),
        "iteration": int(iteration),
        "rng_state": rng_state,
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for group in ALL_GROUPS:
        for i, p in enumerate(model.groups[group]):
            arrays[f"param/{group}/{i}"] = p.value
    if extra_arrays:
        arrays.update(extra_arrays)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, config, meta, raw)."""
    with np.load(path, allow_pickle=False) as data:
        raw = {k: data[k] for k in data.files}
    meta = json.loads(str(raw.pop("meta")))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {meta.get('version')!r}")
    run_config = config_from_string(meta["config"])
    model = DisenModel(run_config.model, meta["n_mels"], meta["n_speakers"])
    for group in ALL_GROUPS:
        for i, p in enumerate(model.groups[group]):
            key = f"param/{group}/{i}"
            stored = raw.pop(key)
            if stored.shape != p.value.shape:
                raise ConfigError(f"checkpoint parameter {key} has shape {stored.shape}, expected {p.value.shape}")
            p.value[...] = stored
    return model, run_config, meta, raw
