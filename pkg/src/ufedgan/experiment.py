"""Config-driven experiments: partition, federated run, attack, evaluation.

A config is a TOML file with the sections below; every key is optional and
command-line flags override the file. The effective config (with all
defaults filled in) is written to every output directory.

.. code-block:: toml

    seed = 0

    [data]
    source = "tiny-image"  # toy:gaussian1d | toy:mixture2d | tiny-image | idx | csv
    path = ""              # idx image file or csv file
    labels = ""            # idx label file
    num_samples = 4000     # size of generated sources
    resize = 0             # downscale images to resize x resize (0 keeps them)
    holdout = 0.2          # fraction kept aside as the real reference set

    [partition]
    num_users = 10
    beta = 0.5

    [model]
    profile = ""           # derived from the data source when empty

    [protocol]             # see ProtocolConfig; per-profile defaults apply
    steps_per_round = 40
    max_rounds = 100
    stop_on_plateau = false

    [attacker]
    enabled = true
    seed = 0
    users = [0]            # links the eavesdropper taps
    direction = "uplink"   # "both" also replays intercepted D weights

    [output]
    dir = "runs/experiment"
    synthetic_samples = 1024
    per_round_metrics = false
"""
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, data, nn
from .attacker import run_attack
from .errors import ConfigError, DataError
from .metrics import (BinProbe, MetricReport, MixtureProbe, evaluate_samples, linear_evaluation,
                      train_probe_classifier, write_metric_csv)
from .protocol import (ClientState, Network, ProtocolConfig, generate_synthetic_dataset, run_until_converged,
                       server_init)
from .rng import make_stream, stream_key
from .transport import EavesdropTap, load_checkpoint, save_checkpoint, transcript_export

# Hyperparameters that make each desk-scale profile train in a reasonable
# number of rounds; used unless the config sets the key explicitly.
PROFILE_DEFAULTS = {
    "gaussian1d": dict(steps_per_round=50, batch_size=256, lr=2e-3),
    "gaussian-mixture-2d": dict(steps_per_round=50, batch_size=256, lr=2e-3),
    "tiny-image-16x16": dict(steps_per_round=40, batch_size=64, lr=2e-4),
    "dcgan-64": dict(),
}

SOURCE_PROFILES = {"toy:gaussian1d": "gaussian1d", "toy:mixture2d": "gaussian-mixture-2d",
                   "tiny-image": "tiny-image-16x16"}


@dataclass
class DataConfig:
    source: str = "toy:gaussian1d"
    path: str = ""
    labels: str = ""
    num_samples: int = 4000
    resize: int = 0
    holdout: float = 0.2


@dataclass
class PartitionConfig:
    num_users: int = 10
    beta: float = 0.5


@dataclass
class AttackerConfig:
    enabled: bool = True
    seed: int = 0
    users: List[int] = field(default_factory=lambda: [0])
    direction: str = "uplink"


@dataclass
class OutputConfig:
    dir: str = "runs/experiment"
    synthetic_samples: int = 1024
    per_round_metrics: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    profile: str = ""
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    attacker: AttackerConfig = field(default_factory=AttackerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    protocol_overrides: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("protocol_overrides")
        d["protocol"]["betas"] = list(d["protocol"]["betas"])
        return d

    @property
    def out_dir(self):
        return Path(self.output.dir)

    @property
    def experiment_id(self):
        """Short hash of the effective config, independent of where outputs go."""
        d = self.to_dict()
        d["output"].pop("dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _section(cls, values, name):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def default_profile(source):
    if source in SOURCE_PROFILES:
        return SOURCE_PROFILES[source]
    if source == "idx":
        return ""  # decided from the image size once loaded
    raise ConfigError(f"data source {source!r} needs an explicit [model] profile")


def build_config(raw=None, seed=None, rounds=None, out=None):
    """ExperimentConfig from a parsed TOML mapping plus flag overrides."""
    raw = dict(raw or {})
    top = {"seed", "data", "partition", "model", "protocol", "attacker", "output"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    d = _section(DataConfig, raw.get("data"), "data")
    if d.source not in ("toy:gaussian1d", "toy:mixture2d", "tiny-image", "idx", "csv"):
        raise ConfigError(f"unknown data source {d.source!r}")
    if not 0 < d.holdout < 1:
        raise ConfigError("data.holdout must lie in (0, 1)")
    model = dict(raw.get("model") or {})
    if set(model) - {"profile"}:
        raise ConfigError(f"[model]: unknown keys {sorted(set(model) - {'profile'})}")
    profile = model.get("profile") or (default_profile(d.source) if d.source != "csv" else "")
    if d.source == "csv" and not profile:
        raise ConfigError("data source 'csv' needs an explicit [model] profile")
    if profile:
        profile = nn.PROFILE_ALIASES.get(profile, profile)
        if profile != "dcgan-64" and profile not in nn.TOY_PROFILES:
            raise ConfigError(f"unknown model profile {profile!r}")
    proto = dict(raw.get("protocol") or {})
    if rounds is not None:
        proto["max_rounds"] = int(rounds)
    cfg = ExperimentConfig(
        seed=int(raw.get("seed", 0) if seed is None else seed),
        data=d,
        partition=_section(PartitionConfig, raw.get("partition"), "partition"),
        profile=profile,
        attacker=_section(AttackerConfig, raw.get("attacker"), "attacker"),
        output=_section(OutputConfig, raw.get("output"), "output"),
        protocol_overrides=proto,
    )
    if out is not None:
        cfg.output.dir = str(out)
    if cfg.attacker.direction not in ("uplink", "both"):
        raise ConfigError("attacker.direction must be 'uplink' or 'both'")
    if profile:
        cfg.protocol = resolve_protocol(profile, proto)
    return cfg


def resolve_protocol(profile, overrides):
    values = dict(PROFILE_DEFAULTS.get(profile, {}))
    values.update(overrides)
    values["profile"] = profile
    return _section(ProtocolConfig, values, "protocol")


def load_config(path, seed=None, rounds=None, out=None):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return build_config(raw, seed, rounds, out)


# data ------------------------------------------------------------------------

@dataclass
class PreparedData:
    train: data.LabeledDataset
    test: data.LabeledDataset
    plan: data.PartitionPlan
    probe: object
    toy: Optional[data.ToyDistribution] = None

    def local(self, user):
        return self.train.subset(self.plan.user_indices(user))


def load_dataset(cfg):
    d = cfg.data
    toy = None
    if d.source == "toy:gaussian1d":
        toy = data.gaussian1d()
    elif d.source == "toy:mixture2d":
        toy = data.mixture2d()
    if toy is not None:
        return data.toy_dataset(toy, d.num_samples, cfg.seed), toy
    if d.source == "tiny-image":
        ds = data.tiny_images(d.num_samples, cfg.seed)
    elif d.source == "idx":
        if not d.path:
            raise ConfigError("data.path is required for idx sources")
        ds = data.load_idx_images(d.path, d.labels or None)
    else:
        if not d.path:
            raise ConfigError("data.path is required for csv sources")
        ds = data.load_csv_vectors(d.path)
    if d.resize:
        if ds.samples.ndim != 4:
            raise ConfigError("data.resize applies to image sources only")
        ds = data.downscale(ds, (d.resize, d.resize))
    return ds, None


def _image_profile(ds):
    if ds.samples.ndim == 4 and ds.samples.shape[2:] == (16, 16) and ds.samples.shape[1] == 1:
        return "tiny-image-16x16"
    if ds.samples.ndim == 4 and ds.samples.shape[2:] == (64, 64):
        return "dcgan-64"
    raise ConfigError(f"no model profile fits samples of shape {ds.samples.shape[1:]}; "
                      "set data.resize to 16 or 64, or [model] profile")


def finalize_profile(cfg, ds):
    if not cfg.profile:
        cfg.profile = _image_profile(ds)
        cfg.protocol = resolve_protocol(cfg.profile, cfg.protocol_overrides)
    if cfg.profile == "dcgan-64":
        cfg.protocol.out_channels = int(ds.samples.shape[1])
    g_spec = nn.dcgan_generator_spec(cfg.protocol.out_channels) if cfg.profile == "dcgan-64" \
        else nn.toy_specs(cfg.profile)[0]
    if int(np.prod(g_spec.sample_shape)) != int(np.prod(ds.sample_shape)):
        raise ConfigError(f"profile {cfg.profile} generates {g_spec.sample_shape}, data samples are {ds.sample_shape}")


def split_holdout(ds, fraction, seed):
    order = make_stream(seed, "holdout").permutation(len(ds))
    n_test = max(1, int(round(fraction * len(ds))))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def make_probe(train, toy, seed):
    """The frozen classifier behind IS and FID for this data source."""
    if toy is not None and toy.kind == "gaussian1d":
        return BinProbe.fit(train.samples)
    if toy is not None:
        return MixtureProbe(toy)
    return train_probe_classifier(train, seed=seed)


def prepare(cfg):
    ds, toy = load_dataset(cfg)
    finalize_profile(cfg, ds)
    train, test = split_holdout(ds, cfg.data.holdout, cfg.seed)
    plan = data.dirichlet_partition(train, cfg.partition.num_users, cfg.partition.beta, cfg.seed)
    return PreparedData(train, test, plan, make_probe(train, toy, cfg.seed), toy)


# output helpers -----------------------------------------------------------------

def source_digest():
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def stream_names(cfg, users):
    names = ["holdout", "partition", "probe"]
    names += {"toy:gaussian1d": ["toy-data"], "toy:mixture2d": ["toy-data"], "tiny-image": ["tiny-images"]}.get(
        cfg.data.source, [])
    for u in users:
        names += [f"server-init:{u}:generator", f"server-init:{u}:discriminator", f"client-batch:{u}",
                  f"latent:{u}", f"synthetic:{u}", f"eval:{u}:<round>"]
    return names


def write_run_header(cfg, out, users=()):
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "VERSION").write_text(f"ufedgan {__version__}\nsource-sha256 {source_digest()}\n")
    lines = [f"{name} seed={cfg.seed} key={stream_key(cfg.seed, name):032x}" for name in stream_names(cfg, users)]
    if cfg.attacker.enabled:
        for name in ("attacker-init:generator", "attacker-init:discriminator", "attacker-latent",
                     "attacker-samples"):
            lines.append(f"{name} seed={cfg.attacker.seed} key={stream_key(cfg.attacker.seed, name):032x}")
    (out / "rng_streams.txt").write_text("\n".join(lines) + "\n")


def write_image_grid(path, images, cols=8):
    """Tile images in [-1, 1] into one binary PGM (1 channel) or PPM (3 channels)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise DataError(f"image grid needs (n, 1|3, h, w) images, got {images.shape}")
    n, c, h, w = images.shape
    cols = min(cols, n)
    rows = -(-n // cols)
    canvas = np.zeros((rows * h, cols * w, c))
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        canvas[r * h:(r + 1) * h, q * w:(q + 1) * w] = img.transpose(1, 2, 0)
    pixels = np.clip(np.round((canvas + 1) * 127.5), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    body = pixels[..., 0] if c == 1 else pixels
    Path(path).write_bytes(magic + f"\n{cols * w} {rows * h}\n255\n".encode() + body.tobytes())


def _is_image(samples):
    return np.asarray(samples).ndim == 4


# subcommands -------------------------------------------------------------------

def run_partition(cfg):
    """Partition the training split; write the plan and return a summary table."""
    ds, _ = load_dataset(cfg)
    train, _ = split_holdout(ds, cfg.data.holdout, cfg.seed)
    plan = data.dirichlet_partition(train, cfg.partition.num_users, cfg.partition.beta, cfg.seed)
    if plan.counts.sum(axis=1).tolist() != np.bincount(train.labels, minlength=train.num_classes).tolist():
        raise DataError("partition does not conserve class sizes")
    out = cfg.out_dir
    write_run_header(cfg, out)
    plan.save(out / "partition.json")
    header = f"# N={plan.num_users} beta={plan.beta} seed={plan.seed} samples={len(train)}"
    table = ["user," + ",".join(f"class{c}" for c in range(train.num_classes)) + ",total"]
    for u in range(plan.num_users):
        row = plan.counts[:, u]
        table.append(f"{u}," + ",".join(str(int(x)) for x in row) + f",{int(row.sum())}")
    text = "\n".join([header, *table, "# conservation: ok"]) + "\n"
    (out / "partition_summary.csv").write_text(text)
    return plan, text


@dataclass
class RunResult:
    server: object
    final: object
    prepared: PreparedData
    reports: list
    summary: list
    taps: dict


def _evaluator(prepared, cfg):
    def evaluate(server, user, round_):
        samples = generate_synthetic_dataset(server, user, cfg.protocol.is_samples, stream=f"eval:{user}:{round_}")
        fields = evaluate_samples(samples, prepared.test.samples, None)
        return {k: v for k, v in fields.items() if k != "inception_score"}
    return evaluate


def run_experiment(cfg, log=print):
    """Partition, train every user's GAN under the split protocol, save artifacts."""
    out = cfg.out_dir
    prepared = prepare(cfg)
    users = [u for u in range(cfg.partition.num_users) if len(prepared.plan.user_indices(u))]
    if not users:
        raise DataError("every user received an empty partition")
    write_run_header(cfg, out, users)
    prepared.plan.save(out / "partition.json")
    server = server_init(cfg.partition.num_users, cfg.protocol, cfg.seed, prepared.probe)
    for u in set(server.users) - set(users):
        del server.users[u]
        log(f"user {u}: empty partition, not enrolled")
    clients = {u: ClientState(u, prepared.local(u).unlabeled(), cfg.protocol, cfg.seed) for u in users}
    tapped = [u for u in cfg.attacker.users if u in server.users] if cfg.attacker.enabled else []
    taps = {u: EavesdropTap(cfg.attacker.direction) for u in tapped}
    network = Network(users, {u: [t] for u, t in taps.items()})
    evaluator = _evaluator(prepared, cfg) if cfg.output.per_round_metrics else None
    metrics_path = out / "metrics.csv"
    write_metric_csv(metrics_path, [])

    def on_round(rr):
        for r in rr.reports:
            r.experiment_id = cfg.experiment_id
        write_metric_csv(metrics_path, rr.reports, append=True)

    final = run_until_converged(server, clients, network, evaluator, on_round=on_round)
    for u in users:
        log(f"user {u}: stopped after {server.users[u].monitor.rounds} rounds ({final.stop_reasons[u]})")

    summary = []
    for sub in ("checkpoints", "synthetic", "transcripts", "grids"):
        (out / sub).mkdir(exist_ok=True)
    for u in users:
        slot = server.users[u]
        save_checkpoint(out / "checkpoints" / f"user{u}-generator.ufgc", slot.gan.generator,
                        profile=cfg.profile, latent_dim=slot.gan.latent_dim, user=u, round=slot.monitor.rounds)
        save_checkpoint(out / "checkpoints" / f"user{u}-discriminator.ufgc", slot.gan.discriminator,
                        profile=cfg.profile, user=u, round=slot.monitor.rounds)
        synth = generate_synthetic_dataset(server, u, cfg.output.synthetic_samples)
        np.save(out / "synthetic" / f"user{u}.npy", synth)
        fields = evaluate_samples(synth, prepared.test.samples, prepared.probe, cfg.protocol.is_splits)
        summary.append(MetricReport(slot.monitor.rounds, u, "server", experiment_id=cfg.experiment_id, **fields))
        if _is_image(synth):
            write_image_grid(out / "grids" / f"user{u}-server.pgm", synth[:64])
    for u, tap in taps.items():
        path = transcript_export(tap, out / "transcripts" / f"user{u}.ufgt", seed=cfg.seed)
        result = attack(cfg, tap, u, prepared)
        summary.append(result.report)
        log(f"user {u}: transcript {path.name} with {len(tap.frames)} frames")
    write_metric_csv(out / "summary.csv", summary)
    (out / "final_state.json").write_text(json.dumps({
        "rounds": final.rounds,
        "stop_reasons": {str(u): r for u, r in sorted(final.stop_reasons.items())},
        "server_state_sha256": server.digest(),
    }, indent=2) + "\n")
    return RunResult(server, final, prepared, final.metric_reports, summary, taps)


def attack(cfg, transcript, user, prepared):
    """Replay ``transcript`` as the eavesdropper and score its generator."""
    result = run_attack(transcript, cfg.protocol, cfg.attacker.seed, user, prepared.test.samples, prepared.probe,
                        num_samples=cfg.output.synthetic_samples, use_downlink=cfg.attacker.direction == "both",
                        splits=cfg.protocol.is_splits)
    result.report.experiment_id = cfg.experiment_id
    if _is_image(result.samples):
        (cfg.out_dir / "grids").mkdir(parents=True, exist_ok=True)
        write_image_grid(cfg.out_dir / "grids" / f"user{user}-attacker.pgm", result.samples[:64])
    return result


def load_generator(path):
    """Rebuild a generator from a checkpoint written by :func:`run_experiment`."""
    meta, flat = load_checkpoint(path)
    spec = nn.ModelSpec.from_dict(meta["spec"])
    model = nn.Model(spec, np.random.default_rng(0), np.dtype(meta.get("dtype", "float32")))
    model.set_flat(flat)
    return model, meta


def evaluate_artifact(cfg, prepared, checkpoint=None, synthetic=None, num_samples=None, seed=None):
    """Metric report and linear-evaluation accuracy for a generator or sample set.

    The synthetic samples are pseudo-labelled by the probe, a linear
    classifier is fit on them and scored on the held-out real split, next to
    the same classifier fit on the real training split.
    """
    if (checkpoint is None) == (synthetic is None):
        raise ConfigError("evaluate needs exactly one of a checkpoint or a synthetic sample file")
    n = num_samples or cfg.output.synthetic_samples
    if checkpoint is not None:
        G, meta = load_generator(checkpoint)
        z = make_stream(cfg.seed if seed is None else seed, "evaluate").standard_normal(
            (n, int(meta.get("latent_dim", G.spec.input_shape[0])))).astype(G.dtype)
        samples = G.forward(z, training=False).data.copy()
    else:
        try:
            samples = np.load(synthetic)
        except (OSError, ValueError) as exc:
            raise DataError(f"{synthetic}: cannot read sample set: {exc}") from None
    if samples.shape[1:] != prepared.test.sample_shape:
        raise DataError(f"samples of shape {samples.shape[1:]} do not match data shape {prepared.test.sample_shape}")
    fields = evaluate_samples(samples, prepared.test.samples, prepared.probe, cfg.protocol.is_splits)
    report = MetricReport(0, -1, "server", experiment_id=cfg.experiment_id, **fields)
    k = prepared.train.num_classes
    accuracy = {}
    if k > 1:
        pseudo = np.argmax(prepared.probe.predict_proba(samples), axis=1)
        accuracy["synthetic"] = linear_evaluation(samples, pseudo, prepared.test.samples, prepared.test.labels, k)
        accuracy["real"] = linear_evaluation(prepared.train.samples, prepared.train.labels, prepared.test.samples,
                                             prepared.test.labels, k)
    return report, accuracy
