"""Training loops for the three stages, checkpoint helpers and the synthesis pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses as L
from .config import RunConfig
from .evaluation import MetricReport, fvd_proxy, report, retrieval_accuracy, video_features, video_ssim
from .frame_encoder import FrameEncoder
from .numerics import Adam, NonFiniteError, Tensor, backward, no_grad, tensorio
from .numerics.autograd import _lift
from .prior import PriorModel, sample_future
from .scenegraph import GraphTrack, Vocabulary
from .synthdata import Episode, EpisodeConfig, default_vocabulary, episode_seed, oracle_pass_rate
from .vq import VQAutoencoder
from .vsg_encoder import VSGEncoder


class CsvLog:
    """Per-step loss rows, echoed as CSV to ``stream`` when one is given."""

    def __init__(self, stage: str, stream=None):
        self.stage, self.stream, self.rows = stage, stream, []
        self._header = None

    def __call__(self, step: int, **values) -> None:
        row = {"step": step, **{k: float(v) for k, v in values.items()}}
        self.rows.append(row)
        if self.stream is None:
            return
        keys = ["stage"] + list(row)
        if keys != self._header:
            self._header = keys
            print(",".join(keys), file=self.stream)
        print(",".join([self.stage] + [f"{row[k]:.6g}" if k != "step" else str(step) for k in row]),
              file=self.stream, flush=True)


def _check_finite(name: str, value: Tensor) -> None:
    if not math.isfinite(value.item()):
        raise NonFiniteError(f"{name} loss is not finite")


def episode_config(cfg: RunConfig, seed: int | None = None) -> EpisodeConfig:
    d = cfg.data
    return EpisodeConfig(T=d.T, H=d.H, W=d.W, C=d.C, min_objects=d.min_objects, max_objects=d.max_objects,
                         min_given_graphs=d.min_given_graphs, max_nodes=d.max_nodes, sprite_size=d.sprite_size,
                         speed=d.speed, margin=d.margin, motion_threshold=d.motion_threshold,
                         motion_window=d.motion_window, seed=d.seed if seed is None else seed)


def videos_of(episodes: list[Episode]) -> np.ndarray:
    return np.stack([ep.video for ep in episodes]).astype(np.float32)


# --- model construction ----------------------------------------------------

def build_vq(cfg: RunConfig, seed: int | None = None) -> VQAutoencoder:
    q = cfg.vq
    return VQAutoencoder(cfg.data.H, cfg.data.W, cfg.data.C, q.stride, q.K, q.d_z, q.hidden, q.beta,
                         rng=np.random.default_rng(q.seed if seed is None else seed))


def build_vsg(cfg: RunConfig, vocab: Vocabulary | None = None, seed: int | None = None):
    v = cfg.vsg
    rng = np.random.default_rng(v.seed if seed is None else seed)
    vsg = VSGEncoder(vocab or default_vocabulary(), v.d, v.spatial_layers, v.temporal_layers, v.heads,
                     cfg.data.max_nodes, cfg.data.T, rng)
    fenc = FrameEncoder(cfg.data.H, cfg.data.W, cfg.data.C, v.patch, v.d, v.frame_layers, v.heads, rng)
    return vsg, fenc


def build_prior(cfg: RunConfig, seed: int | None = None) -> PriorModel:
    p = cfg.prior
    cells = (cfg.data.H // cfg.vq.stride) * (cfg.data.W // cfg.vq.stride)
    return PriorModel(cfg.vq.K, cfg.vsg.d, p.d_model, p.layers, p.heads, cfg.data.T, cells,
                      rng=np.random.default_rng(p.seed if seed is None else seed))


# --- VQ stage ----------------------------------------------------------------

def train_vq(frames: np.ndarray, cfg: RunConfig, log: CsvLog | None = None, seed: int | None = None,
             steps: int | None = None) -> VQAutoencoder:
    """Codebook seeded from encoder outputs; codes unused over ``restart_every`` steps are
    re-seeded from the current batch."""
    q = cfg.vq
    seed = q.seed if seed is None else seed
    steps = q.steps if steps is None else steps
    frames = np.asarray(frames, dtype=np.float32).reshape(-1, cfg.data.H, cfg.data.W, cfg.data.C)
    rng = np.random.default_rng(seed + 1)
    model = build_vq(cfg, seed)
    with no_grad():
        z = model.encode_latents(frames[rng.integers(0, len(frames), 256)]).data.reshape(-1, q.d_z)
    model.codebook.data[...] = z[rng.choice(len(z), q.K, replace=len(z) < q.K)]
    opt = Adam(model.parameters(), lr=q.lr)
    usage = np.zeros(q.K)
    for step in range(1, steps + 1):
        batch = frames[rng.integers(0, len(frames), q.batch_size)]
        out = model.losses(batch)
        _check_finite("vq", out["loss"])
        opt.zero_grad()
        backward(out["loss"])
        opt.step()
        usage += np.bincount(out["indices"].ravel(), minlength=q.K)
        if q.restart_every and step % q.restart_every == 0 and step < steps:
            dead = np.nonzero(usage == 0)[0]
            if len(dead):
                with no_grad():
                    zz = model.encode_latents(batch).data.reshape(-1, q.d_z)
                model.codebook.data[dead] = zz[rng.choice(len(zz), len(dead))]
            usage[:] = 0
        if log is not None:
            log(step, loss=out["loss"].item(), recon=out["recon"].item(),
                codebook=out["codebook"].item(), commitment=out["commitment"].item())
    return model


def codebook_utilization(model: VQAutoencoder, frames) -> float:
    return len(np.unique(model.encode_indices(frames))) / model.K


def dataset_latents(model: VQAutoencoder, episodes: list[Episode], chunk: int = 128) -> np.ndarray:
    """(N, T, h'*w') code indices for every frame of every episode, ``chunk`` episodes at a time."""
    out = []
    for s in range(0, len(episodes), chunk):
        v = videos_of(episodes[s:s + chunk])
        N, T = v.shape[:2]
        out.append(model.encode_indices(v.reshape(N * T, *v.shape[2:])).reshape(N, T, -1))
    return np.concatenate(out)


# --- VSG pretraining -----------------------------------------------------------

def pretraining_losses(vsg: VSGEncoder, fenc: FrameEncoder, episodes: list[Episode], which) -> dict:
    """The requested contrastive terms for one batch of videos, plus their sum under ``loss``."""
    tb = vsg.encode_tracks([ep.track for ep in episodes])
    v = videos_of(episodes)
    B, T = v.shape[:2]
    feats = fenc(v.reshape(B * T, *v.shape[2:]))
    f = feats.frame_vector.reshape(B, T, -1)
    out = {}
    if "intra" in which:
        out["intra"] = L.intra_loss(tb.reps, f)
    if "inter" in which:
        out["inter"] = L.inter_loss(tb.reps, f)
    if "finegrain" in which:
        e, mask = tb.spatial.semantic
        bs = np.array([b for b, _ in tb.given])
        ts = np.array([t for _, t in tb.given])
        fm = feats.feature_map
        r = fm.reshape(B, T, fm.shape[1] * fm.shape[2], fm.shape[3])[bs, ts]
        out["finegrain"] = L.finegrain_loss_from_scores(L.matching_matrix(e, mask, r))
    terms = [out[k] for k in ("intra", "inter", "finegrain") if k in out]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    out["loss"] = total
    return out


def pretrain_vsg(episodes: list[Episode], cfg: RunConfig, log: CsvLog | None = None, losses=None,
                 seed: int | None = None, steps: int | None = None):
    v = cfg.vsg
    which = tuple(v.losses if losses is None else losses)
    if not which:
        raise ValueError("pretraining needs at least one loss")
    seed = v.seed if seed is None else seed
    steps = v.steps if steps is None else steps
    vsg, fenc = build_vsg(cfg, seed=seed)
    params = vsg.parameters() + fenc.parameters()
    opt = Adam(params, lr=v.lr, clip_norm=5.0)
    rng = np.random.default_rng(seed + 1)
    for step in range(1, steps + 1):
        batch = [episodes[i] for i in rng.choice(len(episodes), v.batch_size, replace=False)]
        out = pretraining_losses(vsg, fenc, batch, which)
        _check_finite("pretraining", out["loss"])
        opt.zero_grad()
        backward(out["loss"])
        opt.step()
        if log is not None:
            log(step, **{k: val.item() for k, val in out.items()})
    return vsg, fenc


def graph_frame_vectors(vsg: VSGEncoder, fenc: FrameEncoder, episodes: list[Episode]):
    """Graph representations and frame vectors, both (N, T, d)."""
    with no_grad():
        reps = vsg.encode_tracks([ep.track for ep in episodes]).reps.data
        v = videos_of(episodes)
        N, T = v.shape[:2]
        f = fenc(v.reshape(N * T, *v.shape[2:])).frame_vector.data.reshape(N, T, -1)
    return reps, f


def retrieval_score(vsg: VSGEncoder, fenc: FrameEncoder, episodes: list[Episode], batch: int = 8) -> float:
    """Mean graph->frame top-1 accuracy over batches of ``batch`` videos and every frame index."""
    accs = []
    for s in range(0, len(episodes) - batch + 1, batch):
        g, f = graph_frame_vectors(vsg, fenc, episodes[s:s + batch])
        accs += [retrieval_accuracy(g[:, t], f[:, t]) for t in range(g.shape[1])]
    if not accs:
        raise ValueError(f"need at least {batch} episodes")
    return float(np.mean(accs))


# --- prior stage ---------------------------------------------------------------

def graph_representations(vsg: VSGEncoder, tracks: list[GraphTrack], chunk: int = 64) -> np.ndarray:
    with no_grad():
        return np.concatenate([vsg.encode_tracks(tracks[s:s + chunk]).reps.data
                               for s in range(0, len(tracks), chunk)])


def train_prior(latents: np.ndarray, tracks: list[GraphTrack], vsg: VSGEncoder, cfg: RunConfig,
                log: CsvLog | None = None, order: int | None = None, seed: int | None = None,
                steps: int | None = None, joint: bool | None = None) -> PriorModel:
    """Teacher-forced nll + weighted graph mse. With ``joint`` the VSG encoder is trained
    along with the prior (no pretraining); otherwise it stays frozen.

    A fraction ``condition_dropout`` of sequences sees all-zero graph
    representations, which is how the same prior samples unconditionally.
    """
    p = cfg.prior
    order = p.order if order is None else order
    seed = p.seed if seed is None else seed
    steps = p.steps if steps is None else steps
    joint = p.joint_vsg if joint is None else joint
    prior = build_prior(cfg, seed)
    params = prior.parameters() + (vsg.parameters() if joint else [])
    opt = Adam(params, lr=p.lr, clip_norm=5.0)
    rng = np.random.default_rng(seed + 1)
    frozen = None if joint else graph_representations(vsg, tracks)
    N = len(latents)
    for step in range(1, steps + 1):
        idx = rng.choice(N, min(p.batch_size, N), replace=False)
        keep = (rng.random(len(idx)) >= p.condition_dropout).astype(np.float64)
        if joint:
            reps = vsg.encode_tracks([tracks[i] for i in idx]).reps
        else:
            reps = Tensor(frozen[idx])
        reps = reps * _lift(keep[:, None, None], reps)
        out = prior.forward(latents[idx], reps, order, graph_weight=keep)
        loss = out.nll + p.graph_mse_weight * out.graph_mse
        _check_finite("prior", loss)
        opt.zero_grad()
        backward(loss)
        opt.step()
        if log is not None:
            log(step, loss=loss.item(), nll=out.nll.item(), graph_mse=out.graph_mse.item())
    return prior


# --- synthesis -----------------------------------------------------------------

@dataclass
class Synthesis:
    video: np.ndarray  # (B, T, H, W, C)
    latents: np.ndarray  # (B, T, cells)


def synthesize(start_frames, tracks: list[GraphTrack], vq: VQAutoencoder, vsg: VSGEncoder, prior: PriorModel,
               order: int, seeds, temperature: float = 1.0, top_k: int | None = None,
               conditioned: bool = True) -> Synthesis:
    """Start frames (B, H, W, C) + graph tracks -> videos. Frame 0 is the VQ round trip of
    the start frame; ``conditioned=False`` feeds all-zero graph representations."""
    start = np.asarray(start_frames, dtype=np.float32)
    first = vq.encode_indices(start).reshape(len(start), -1)
    reps = graph_representations(vsg, tracks)
    if not conditioned:
        reps = np.zeros_like(reps)
    lat = sample_future(prior, first, reps, order, temperature, seeds, top_k or None)
    B, T, n = lat.shape
    frames = vq.decode_latents(lat.reshape(B * T, vq.h, vq.w))
    return Synthesis(frames.reshape(B, T, *frames.shape[1:]), lat)


def frame_features(fenc: FrameEncoder, videos: np.ndarray, chunk: int = 256) -> np.ndarray:
    """(N, T, H, W, C) videos -> (N, 2d) video features from frame vectors."""
    v = np.asarray(videos, dtype=np.float32)
    N, T = v.shape[:2]
    flat = v.reshape(N * T, *v.shape[2:])
    with no_grad():
        vec = np.concatenate([fenc(flat[s:s + chunk]).frame_vector.data for s in range(0, len(flat), chunk)])
    return video_features(vec.reshape(N, T, -1))


def evaluate_synthesis(episodes: list[Episode], vq: VQAutoencoder, vsg: VSGEncoder, prior: PriorModel,
                       evaluator: FrameEncoder, cfg: RunConfig, order: int | None = None,
                       repeats: int | None = None, seed: int | None = None, conditioned: bool = True,
                       batch: int = 16) -> dict[str, MetricReport]:
    """Synthesize every episode from its first frame and track ``repeats`` times.

    Per repeat: fvd_proxy against the real videos (features from the fixed
    ``evaluator`` frame encoder), mean SSIM over predicted frames, and the pixel
    oracle pass rate over given graphs after frame 0.
    """
    order = cfg.prior.order if order is None else order
    repeats = cfg.eval.repeats if repeats is None else repeats
    seed = cfg.eval.seed if seed is None else seed
    real = videos_of(episodes)
    real_feats = frame_features(evaluator, real)
    ecfg = episode_config(cfg)
    fvd, ssim_vals, oracle = [], [], []
    for r in range(repeats):
        fake = []
        for s in range(0, len(episodes), batch):
            part = episodes[s:s + batch]
            seeds = [episode_seed(seed + r, s + i) for i in range(len(part))]
            out = synthesize(real[s:s + batch, 0], [ep.track for ep in part], vq, vsg, prior, order, seeds,
                             cfg.prior.temperature, cfg.prior.top_k or None, conditioned)
            fake.append(out.video)
        fake = np.concatenate(fake)
        fvd.append(fvd_proxy(real_feats, frame_features(evaluator, fake)))
        ssim_vals.append(np.mean([video_ssim(a[1:], b[1:]) for a, b in zip(real, fake)]))
        rates = [oracle_pass_rate(f, ep.track, ecfg, frames=range(1, ep.track.length))
                 for f, ep in zip(fake, episodes) if any(t > 0 for t in ep.track.frames())]
        oracle.append(np.mean(rates))
    return {"fvd_proxy": report("fvd_proxy", fvd), "ssim": report("ssim", ssim_vals),
            "oracle_pass": report("oracle_pass", oracle)}


# --- checkpoints ---------------------------------------------------------------

def save_model(directory, kind: str, modules: dict, extra: dict | None = None,
               files: dict[str, str] | None = None) -> None:
    tensors, configs = {}, {}
    for prefix, module in modules.items():
        configs[prefix] = module.config()
        for name, arr in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = arr
    tensorio.save_checkpoint(directory, tensors, {"kind": kind, "modules": configs, **(extra or {})}, files)


def _split_state(tensors: dict, prefix: str) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def load_model(directory, kind: str):
    path = Path(directory)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    tensors, manifest = tensorio.load_checkpoint(path)
    if manifest.get("kind") != kind:
        raise ValueError(f"{path} holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")
    mods = {}
    for prefix, conf in manifest["modules"].items():
        conf = dict(conf)
        if prefix == "vq":
            m = VQAutoencoder(**conf)
        elif prefix == "vsg":
            vocab = Vocabulary.from_dict(conf.pop("vocab"))
            m = VSGEncoder(vocab, **conf)
        elif prefix == "frame":
            m = FrameEncoder(**conf)
        elif prefix == "prior":
            m = PriorModel(**conf)
        else:
            raise ValueError(f"unknown module {prefix!r} in {path}")
        m.load_state_dict(_split_state(tensors, prefix))
        mods[prefix] = m
    return mods, manifest

