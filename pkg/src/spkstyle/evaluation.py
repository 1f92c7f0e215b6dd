"""Speaker verification with condition-aware trial pairing, embedding
probes, conversion inference, and embedding export/projection.

Verification scores pooled (time-averaged) embeddings with cosine
similarity.  Same-speaker trial pairs can be constrained to share or differ
in session ("WC"/"AC") or style ("WE"/"AE"); different-speaker pairs are
sampled without constraint.  The equal error rate sweeps every observed
score threshold and linearly interpolates between the two operating points
bracketing the crossing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError, UndefinedScoreError
from .features import instance_normalize, read_features, resolve_path
from .losses import cross_entropy_logits_grad
from .model import DisenModel
from .nn import Adam, LeakyReLU, Linear, Sequential, global_average_pool

CONDITIONS = ("WC", "AC", "WE", "AE", "unconstrained")
STREAMS = ("before_disen", "speaker", "style")


# ---------------------------------------------------------------------------
# embeddings and scores
# ---------------------------------------------------------------------------


def embed_utterance(values: np.ndarray, model: DisenModel, which: str) -> np.ndarray:
    """Pooled embedding of one (T, F) utterance from the selected stream."""
    return model.pooled_embedding(np.asarray(values), which)


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedScoreError("cosine score undefined for zero-norm embeddings")
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# trial lists
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    utt_a: str
    utt_b: str
    target: bool
    condition: str


@dataclass
class ScoredTrials:
    trials: list[Trial]
    scores: np.ndarray

    def split_scores(self):
        is_target = np.array([t.target for t in self.trials])
        return self.scores[is_target], self.scores[~is_target]


def _pair_satisfies(rec_a: dict, rec_b: dict, condition: str) -> bool:
    if condition == "WC":
        return rec_a["session_id"] == rec_b["session_id"]
    if condition == "AC":
        return rec_a["session_id"] != rec_b["session_id"]
    if condition == "WE":
        return rec_a["style_id"] == rec_b["style_id"]
    if condition == "AE":
        return rec_a["style_id"] != rec_b["style_id"]
    return True


def build_trials(records, condition: str, n_target: int, n_nontarget: int, seed: int) -> list[Trial]:
    """Sample target pairs under the pairing condition and unconstrained
    different-speaker non-target pairs; deterministic given the seed."""
    if condition not in CONDITIONS:
        raise ParameterError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    if n_target < 0 or n_nontarget < 0:
        raise ParameterError("trial counts must be non-negative")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 5])))
    by_speaker: dict[str, list[dict]] = {}
    for rec in records:
        by_speaker.setdefault(rec["speaker_id"], []).append(rec)

    target_pool: list[tuple[str, str]] = []
    offending = []
    for spk in sorted(by_speaker):
        utts = by_speaker[spk]
        pairs = [
            (a["utterance_id"], b["utterance_id"])
            for a, b in itertools.combinations(utts, 2)
            if _pair_satisfies(a, b, condition)
        ]
        if len(utts) >= 2 and not pairs:
            offending.append(spk)
        target_pool.extend(pairs)
    if n_target > 0 and len(target_pool) < n_target:
        raise DataError(
            f"condition {condition} unsatisfiable: only {len(target_pool)} same-speaker pairs "
            f"available for {n_target} requested; speakers without qualifying pairs: {offending}"
        )

    trials: list[Trial] = []
    if n_target > 0:
        for k in rng.choice(len(target_pool), size=n_target, replace=False):
            a, b = target_pool[k]
            trials.append(Trial(a, b, True, condition))

    ids = [r["utterance_id"] for r in records]
    spk_of = {r["utterance_id"]: r["speaker_id"] for r in records}
    ii, jj = np.triu_indices(len(ids), k=1)
    diff = np.array([spk_of[ids[i]] != spk_of[ids[j]] for i, j in zip(ii, jj)])
    nt_pool = [(ids[i], ids[j]) for i, j in zip(ii[diff], jj[diff])]
    if n_nontarget > 0:
        if len(nt_pool) < n_nontarget:
            raise DataError(f"only {len(nt_pool)} different-speaker pairs for {n_nontarget} requested")
        for k in rng.choice(len(nt_pool), size=n_nontarget, replace=False):
            a, b = nt_pool[k]
            trials.append(Trial(a, b, False, condition))
    return trials


def validate_trials(trials, records) -> None:
    """Re-check every trial against the manifest metadata (post-hoc audit)."""
    by_id = {r["utterance_id"]: r for r in records}
    for t in trials:
        if t.utt_a == t.utt_b:
            raise DataError(f"self-pair {t.utt_a}")
        a, b = by_id[t.utt_a], by_id[t.utt_b]
        same = a["speaker_id"] == b["speaker_id"]
        if t.target != same:
            raise DataError(f"trial {t} target flag contradicts speaker metadata")
        if t.target and not _pair_satisfies(a, b, t.condition):
            raise DataError(f"trial {t} violates condition {t.condition}")


def embed_manifest(records, manifest_dir, model: DisenModel, which: str) -> dict[str, np.ndarray]:
    """Pooled embedding per utterance id (each utterance read and embedded once)."""
    out = {}
    for rec in records:
        fs = read_features(resolve_path(rec, manifest_dir))
        out[rec["utterance_id"]] = embed_utterance(fs.values, model, which)
    return out


def score_trials(trials, embeddings: dict[str, np.ndarray]) -> ScoredTrials:
    scores = np.array([cosine_score(embeddings[t.utt_a], embeddings[t.utt_b]) for t in trials])
    return ScoredTrials(trials=list(trials), scores=scores)


# ---------------------------------------------------------------------------
# equal error rate
# ---------------------------------------------------------------------------


def compute_eer(target_scores, nontarget_scores) -> float:
    """Threshold sweep over all observed scores with linear interpolation at
    the FAR = FRR crossing.

    FAR(t) is the fraction of non-target scores >= t; FRR(t) the fraction of
    target scores < t.  Between adjacent operating points the crossing is
    resolved linearly.
    """
    t = np.sort(np.asarray(target_scores, dtype=np.float64))
    nt = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if t.size == 0 or nt.size == 0:
        raise ParameterError("EER needs at least one target and one non-target score")
    thresholds = np.unique(np.concatenate([t, nt]))
    far = (nt.size - np.searchsorted(nt, thresholds, side="left")) / nt.size
    frr = np.searchsorted(t, thresholds, side="left") / t.size
    far = np.append(far, 0.0)  # threshold above every score
    frr = np.append(frr, 1.0)
    diff = far - frr
    exact = np.nonzero(diff == 0.0)[0]
    if exact.size:
        return float(far[exact[0]])
    i = int(np.nonzero(diff > 0.0)[0][-1])
    lam = diff[i] / (diff[i] - diff[i + 1])
    return float(far[i] + lam * (far[i + 1] - far[i]))


def eer_report(scored: ScoredTrials) -> dict:
    tg, nt = scored.split_scores()
    return {
        "eer": compute_eer(tg, nt),
        "n_target": int(tg.size),
        "n_nontarget": int(nt.size),
        "mean_target_score": float(tg.mean()),
        "mean_nontarget_score": float(nt.mean()),
    }


# ---------------------------------------------------------------------------
# label probes
# ---------------------------------------------------------------------------


def encode_labels(labels) -> tuple[np.ndarray, list]:
    classes = sorted(set(labels))
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index[v] for v in labels]), classes


class Probe:
    """Fully connected classifier trained on pooled embeddings."""

    def __init__(self, in_dim: int, n_classes: int, hidden: int, n_layers: int, seed: int):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 6])))
        dims = [in_dim] + [hidden] * (n_layers - 1) + [n_classes]
        layers = []
        for i in range(n_layers):
            layers.append(Linear(dims[i], dims[i + 1], rng=rng, dtype=np.float64, name=f"probe{i}"))
            if i < n_layers - 1:
                layers.append(LeakyReLU())
        self.mlp = Sequential(layers)
        self.n_classes = n_classes

    def logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.mlp.forward(np.asarray(x, dtype=np.float64), train=train)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=-1)


def train_probe(
    embeddings: np.ndarray,
    labels: np.ndarray,
    *,
    hidden: int = 128,
    n_layers: int = 3,
    steps: int = 600,
    lr: float = 5e-4,
    seed: int = 0,
) -> Probe:
    """Train a small classifier on embeddings with full-batch updates."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if labels.size else 0
    if n_classes < 2:
        raise ParameterError("probe training needs at least 2 classes")
    probe = Probe(embeddings.shape[1], n_classes, hidden, n_layers, seed)
    opt = Adam(probe.mlp.params(), lr=lr)
    x3 = embeddings[:, None, :]  # frame axis of length 1
    for _ in range(steps):
        for p in probe.mlp.params():
            p.grad[...] = 0.0
        logits = probe.mlp.forward(x3, train=True)
        _, g = cross_entropy_logits_grad(logits, labels)
        probe.mlp.backward(g)
        opt.step()
    return probe


def probe_accuracy(probe: Probe, embeddings: np.ndarray, labels: np.ndarray) -> float:
    pred = probe.predict(np.asarray(embeddings, dtype=np.float64)[:, None, :])[:, 0]
    return float((pred == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# conversion
# ---------------------------------------------------------------------------


def _analysis(model: DisenModel, values: np.ndarray):
    x = np.asarray(values)[None].astype(model.cfg.dtype)
    s = model.frame_embeddings(x, train=False)
    spk = global_average_pool(model.speaker_frames(s, train=False))
    sty = global_average_pool(model.style_frames(s, train=False))
    mu, _ = model.content_posterior(instance_normalize(x), train=False)
    return spk, sty, mu


def reconstruct(model: DisenModel, values: np.ndarray) -> np.ndarray:
    """Decode an utterance from its own embeddings and posterior mean."""
    spk, sty, mu = _analysis(model, values)
    return model.decode(spk, sty, mu, out_len=values.shape[0], train=False)[0]


def convert(source: np.ndarray, target: np.ndarray, mode: str, model: DisenModel) -> np.ndarray:
    """Swap the speaker and/or style embedding of ``source`` for ``target``'s.

    Content always comes from the source posterior mean; with
    ``mode="both"`` and ``target == source`` this is exactly the
    reconstruction path.
    """
    if mode not in ("speaker", "style", "both"):
        raise ParameterError(f"unknown conversion mode {mode!r}")
    spk_s, sty_s, mu_s = _analysis(model, source)
    spk_t, sty_t, _ = _analysis(model, target)
    spk = spk_t if mode in ("speaker", "both") else spk_s
    sty = sty_t if mode in ("style", "both") else sty_s
    return model.decode(spk, sty, mu_s, out_len=np.asarray(source).shape[0], train=False)[0]


# ---------------------------------------------------------------------------
# export and projection
# ---------------------------------------------------------------------------


def export_embeddings(records, manifest_dir, model: DisenModel, which: str):
    """Embedding table: (ids, label columns, matrix), one row per utterance."""
    if not records:
        raise ParameterError("cannot export embeddings from an empty manifest")
    emb = embed_manifest(records, manifest_dir, model, which)
    ids = [r["utterance_id"] for r in records]
    labels = {
        "speaker_id": [r["speaker_id"] for r in records],
        "style_id": [r["style_id"] for r in records],
        "session_id": [r["session_id"] for r in records],
    }
    matrix = np.stack([emb[i] for i in ids]).astype(np.float64)
    return ids, labels, matrix


def project_2d(matrix: np.ndarray) -> np.ndarray:
    """Deterministic 2-D view via the two leading principal components.

    Signs are fixed so each component's largest-magnitude loading is
    positive.  Any other projector (e.g. a neighbor embedding) can be swapped
    in downstream; nothing load-bearing depends on this choice.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise ParameterError("projection needs a (n >= 2, d) embedding matrix")
    centered = matrix - matrix.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def write_embedding_csv(path, ids, labels, matrix) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = matrix.shape[1]
        writer.writerow(["utterance_id", "speaker_id", "style_id", "session_id"]
                        + [f"e{i:03d}" for i in range(dim)])
        for i, uid in enumerate(ids):
            writer.writerow(
                [uid, labels["speaker_id"][i], labels["style_id"][i], labels["session_id"][i]]
                + [f"{v:.8g}" for v in matrix[i]]
            )


def read_embedding_csv(path):
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: empty embedding table")
    n_meta = 4
    ids = [r[0] for r in rows]
    labels = {
        "speaker_id": [r[1] for r in rows],
        "style_id": [r[2] for r in rows],
        "session_id": [r[3] for r in rows],
    }
    matrix = np.array([[float(v) for v in r[n_meta:]] for r in rows])
    return ids, labels, matrix
