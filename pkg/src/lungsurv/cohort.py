"""Synthetic longitudinal survival cohorts with known ground truth.

Each subject gets three screening points roughly a year apart, a latent
feature vector driving a proportional-hazards event time, and per-timepoint
observed features (or tiny volumes) whose *rate of change* carries the class
signal. Because the generator knows the true log-risk, fixtures record the
oracle concordance ceiling alongside the data.

Survival clocks start at the last screening point. Censoring is an
independent coin flip; a censored subject's observed time is a uniform
fraction of its (discarded) event time, so censoring never leaks features.

Timeline units are days; the baseline hazard is configured per year.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError

DAYS_PER_YEAR = 365.25
CAUSE_NAMES = ("none", "cardiac", "respiratory")
SPLIT_NAMES = ("unassigned", "fold1", "fold2", "fold3", "fold4", "fold5",
               "internal_test", "external_test")
FIXTURE_SCHEMA_VERSION = 1

# scan-interval jitter: normal sigma giving the target inter-quartile range
_IQR_TO_SIGMA = 1.0 / (2.0 * 0.6744897501960817)


@dataclass
class GeneratorConfig:
    n_subjects: int = 2154
    true_beta: tuple = (0.5, -0.3, 0.8)
    class_ratio: tuple | None = (1, 2)   # non-survivor : survivor; None = natural mix
    baseline_hazard: float = 0.1         # events per year at zero risk
    hazard_shape: str = "exponential"    # or "weibull"
    weibull_k: float = 1.5
    censor_rate: float = 0.3
    slope_signal_strength: float = 1.0
    base_signal_mix: float = 1.0         # 1: snapshots carry the latent; 0: confound only
    progression_anchor: str = "t0"       # where the slope term vanishes: "t0" | "t2"
    obs_noise: float = 0.3
    scan_interval_days: float = 365.0
    scan_jitter_iqr: float = 40.0
    cause_base_ratio: tuple = (374, 344)  # cardiac : respiratory among non-survivors
    volumes: bool = False
    volume_shape: tuple = (16, 16, 16)
    external_offset: float = 0.2
    external_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ConfigurationError("n_subjects must be >= 1")
        if self.baseline_hazard <= 0:
            raise ConfigurationError("baseline_hazard must be > 0")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ConfigurationError("censor_rate must be in [0, 1)")
        if self.hazard_shape not in ("exponential", "weibull"):
            raise ConfigurationError(f"unknown hazard shape {self.hazard_shape!r}")
        if self.hazard_shape == "weibull" and self.weibull_k <= 0:
            raise ConfigurationError("weibull_k must be > 0")
        if self.progression_anchor not in ("t0", "t2"):
            raise ConfigurationError(f"unknown progression anchor {self.progression_anchor!r}")
        if not 0.0 <= self.base_signal_mix <= 1.0:
            raise ConfigurationError("base_signal_mix must be in [0, 1]")
        if self.class_ratio is not None:
            a, b = self.class_ratio
            if a < 1 or b < 1:
                raise ConfigurationError("class_ratio parts must be >= 1")
            if self.censor_rate > 0 and self.n_subjects % (a + b) != 0:
                raise ConfigurationError(
                    f"n_subjects {self.n_subjects} cannot honor a {a}:{b} class ratio")

    def to_dict(self):
        d = dict(self.__dict__)
        for k in ("true_beta", "class_ratio", "cause_base_ratio", "volume_shape"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


@dataclass
class SubjectRecord:
    """Row view over one cohort subject."""
    id: int
    scan_times: np.ndarray          # (3,) day offsets, strictly increasing
    features: np.ndarray            # (3, d) observed features, or (3, D, H, W) volumes
    time: float                     # days from the last scan
    event: int                      # 1 = death
    cause: str                      # "none" unless event
    split_tag: str
    centre: int
    true_risk: float


class Cohort:
    """Columnar cohort storage; immutable by convention after generation."""

    def __init__(self, ids, scan_times, features, latent, times, events, causes,
                 centres, split_codes, true_risks, metadata):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.scan_times = np.asarray(scan_times, dtype=np.float64)
        self.features = np.asarray(features, dtype=np.float64)
        self.latent = np.asarray(latent, dtype=np.float64)
        self.times = np.asarray(times, dtype=np.float64)
        self.events = np.asarray(events, dtype=np.int64)
        self.causes = np.asarray(causes, dtype=np.int64)
        self.centres = np.asarray(centres, dtype=np.int64)
        self.split_codes = np.asarray(split_codes, dtype=np.int64)
        self.true_risks = np.asarray(true_risks, dtype=np.float64)
        self.metadata = dict(metadata)
        self._check()

    def _check(self):
        n = len(self.ids)
        for name in ("scan_times", "features", "latent", "times", "events",
                     "causes", "centres", "split_codes", "true_risks"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"cohort column {name} has wrong length")
        if np.any(np.diff(self.scan_times, axis=1) <= 0):
            raise DataError("scan times must be strictly increasing per subject")
        if np.any(self.times < 0):
            raise DataError("negative follow-up time")
        dead = self.events == 1
        if np.any(self.causes[dead] == 0) or np.any(self.causes[~dead] != 0):
            raise DataError("cause must be set exactly for non-survivors")

    def __len__(self):
        return len(self.ids)

    def subject(self, i: int) -> SubjectRecord:
        return SubjectRecord(
            id=int(self.ids[i]), scan_times=self.scan_times[i],
            features=self.features[i], time=float(self.times[i]),
            event=int(self.events[i]), cause=CAUSE_NAMES[self.causes[i]],
            split_tag=SPLIT_NAMES[self.split_codes[i]],
            centre=int(self.centres[i]), true_risk=float(self.true_risks[i]))

    def split_indices(self, tag: str) -> np.ndarray:
        if tag not in SPLIT_NAMES:
            raise ConfigurationError(f"unknown split tag {tag!r}")
        return np.flatnonzero(self.split_codes == SPLIT_NAMES.index(tag))

    def class_of(self) -> np.ndarray:
        """3-way class: 0 survivor, 1 cardiac death, 2 respiratory death."""
        return np.where(self.events == 1, self.causes, 0)


def _draw_event_times_years(rng, risks, cfg: GeneratorConfig):
    """Inverse-transform sampling from the configured cumulative hazard."""
    u = rng.random(risks.shape)
    scaled = -np.log(u) / (cfg.baseline_hazard * np.exp(risks))
    if cfg.hazard_shape == "exponential":
        return scaled
    return scaled ** (1.0 / cfg.weibull_k)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _draw_subject_batch(rng, m, cfg: GeneratorConfig):
    """Candidate subjects before any class-ratio selection."""
    d = len(cfg.true_beta)
    beta = np.asarray(cfg.true_beta, dtype=np.float64)
    x = rng.standard_normal((m, d))
    risks = x @ beta
    t_event = _draw_event_times_years(rng, risks, cfg) * DAYS_PER_YEAR
    censored = rng.random(m) < cfg.censor_rate
    t_obs = np.where(censored, rng.random(m) * t_event, t_event)
    events = (~censored).astype(np.int64)

    # cause of death leans on the first latent feature around the configured odds
    ca, cb = cfg.cause_base_ratio
    p_cardiac = _sigmoid(np.log(ca / cb) + x[:, 0])
    causes = np.where(rng.random(m) < p_cardiac, 1, 2)
    causes = np.where(events == 1, causes, 0)

    sigma = cfg.scan_jitter_iqr * _IQR_TO_SIGMA
    gaps = cfg.scan_interval_days + sigma * rng.standard_normal((m, 2))
    gaps = np.maximum(gaps, 1.0)
    scan_times = np.zeros((m, 3))
    scan_times[:, 1] = gaps[:, 0]
    scan_times[:, 2] = gaps[:, 0] + gaps[:, 1]

    confound = rng.standard_normal((m, d))
    noise = rng.standard_normal((m, 3, d)) * cfg.obs_noise
    return x, risks, t_obs, events, causes, scan_times, confound, noise


def _observed_features(x, risks, scan_times, confound, noise, cfg: GeneratorConfig):
    beta = np.asarray(cfg.true_beta, dtype=np.float64)
    direction = beta / np.linalg.norm(beta)
    base = cfg.base_signal_mix * x + (1.0 - cfg.base_signal_mix) * confound
    anchor = scan_times[:, 2] if cfg.progression_anchor == "t2" else scan_times[:, 0]
    rel_years = (scan_times - anchor[:, None]) / 365.0
    slope = cfg.slope_signal_strength * risks
    prog = slope[:, None, None] * direction[None, None, :] * rel_years[:, :, None]
    return base[:, None, :] + prog + noise


def _feature_volumes(obs_features, cfg: GeneratorConfig, rng):
    """Tiny phantoms: a centred blob whose amplitude tracks the feature signal."""
    n = obs_features.shape[0]
    D, H, W = cfg.volume_shape
    zz, yy, xx = np.meshgrid(np.linspace(-1, 1, D), np.linspace(-1, 1, H),
                             np.linspace(-1, 1, W), indexing="ij")
    blob = np.exp(-((zz ** 2 + yy ** 2 + xx ** 2) / 0.18))
    amp = 1.0 + np.tanh(obs_features.mean(axis=2))          # (n, 3)
    vols = amp[:, :, None, None, None] * blob[None, None]
    vols = vols + 0.05 * rng.standard_normal((n, 3, D, H, W))
    return vols


def oracle_concordance(risks, times, events) -> float:
    """Literal pair enumeration of Harrell's C; the fixture's stored ceiling."""
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    num = 0.0
    den = 0
    order = np.argsort(times, kind="stable")
    t, e, h = times[order], events[order], risks[order]
    for i in range(len(t)):
        if e[i] != 1:
            continue
        later = t > t[i]
        den += int(later.sum())
        num += np.sum(h[i] > h[later]) + 0.5 * np.sum(h[i] == h[later])
    if den == 0:
        raise DataError("no comparable pairs in generated cohort")
    return float(num / den)


def simulate_cohort(cfg: GeneratorConfig) -> Cohort:
    """Generate a cohort per the config; deterministic under its seed."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_subjects
    enforce_ratio = cfg.class_ratio is not None and cfg.censor_rate > 0
    if enforce_ratio:
        a, b = cfg.class_ratio
        want_events = n * a // (a + b)
        want_censored = n - want_events
    cols = {k: [] for k in ("x", "risk", "time", "event", "cause", "scans",
                            "confound", "noise")}
    got_events = got_censored = 0
    total = 0
    while total < n:
        m = max(256, 2 * (n - total))
        x, risks, t_obs, events, causes, scans, confound, noise = \
            _draw_subject_batch(rng, m, cfg)
        for i in range(m):
            if total >= n:
                break
            if enforce_ratio:
                if events[i] == 1:
                    if got_events >= want_events:
                        continue
                    got_events += 1
                else:
                    if got_censored >= want_censored:
                        continue
                    got_censored += 1
            cols["x"].append(x[i])
            cols["risk"].append(risks[i])
            cols["time"].append(t_obs[i])
            cols["event"].append(events[i])
            cols["cause"].append(causes[i])
            cols["scans"].append(scans[i])
            cols["confound"].append(confound[i])
            cols["noise"].append(noise[i])
            total += 1

    x = np.asarray(cols["x"])
    risks = np.asarray(cols["risk"])
    scans = np.asarray(cols["scans"])
    obs = _observed_features(x, risks, scans, np.asarray(cols["confound"]),
                             np.asarray(cols["noise"]), cfg)
    if cfg.volumes:
        features = _feature_volumes(obs, cfg, rng)
    else:
        features = obs

    times = np.asarray(cols["time"])
    events = np.asarray(cols["event"], dtype=np.int64)
    metadata = {
        "config": cfg.to_dict(),
        "schema_version": FIXTURE_SCHEMA_VERSION,
        "n_events": int(events.sum()),
        "oracle_c": oracle_concordance(risks, times, events),
    }
    return Cohort(ids=np.arange(total), scan_times=scans, features=features,
                  latent=x, times=times, events=events,
                  causes=np.asarray(cols["cause"], dtype=np.int64),
                  centres=np.zeros(total, dtype=np.int64),
                  split_codes=np.zeros(total, dtype=np.int64),
                  true_risks=risks, metadata=metadata)


def assign_splits(cohort: Cohort, seed: int, n_centres: int = 32,
                  n_external_centres: int = 6) -> Cohort:
    """Assign centres, hold external centres out, stratify the rest 6 ways.

    External subjects get the configured distribution shift (intensity offset
    plus extra feature noise). The internal pool is dealt class-by-class into
    fold1..fold5 + internal_test with a running cursor, so group sizes differ
    by at most one and each class stays near its global proportion.
    """
    n = len(cohort)
    if n < 7:
        raise ConfigurationError("need at least 7 subjects for the split layout")
    if not 0 < n_external_centres < n_centres:
        raise ConfigurationError("external centres must be a proper nonempty subset")
    rng = np.random.default_rng(seed)
    centres = rng.integers(0, n_centres, size=n)
    external_centres = rng.choice(n_centres, size=n_external_centres, replace=False)
    is_external = np.isin(centres, external_centres)
    if is_external.all() or not is_external.any():
        # tiny cohorts can land everyone on one side; force one subject over
        flip = rng.integers(0, n)
        is_external[flip] = not is_external[flip]

    codes = np.zeros(n, dtype=np.int64)
    codes[is_external] = SPLIT_NAMES.index("external_test")

    groups = [SPLIT_NAMES.index(t) for t in
              ("fold1", "fold2", "fold3", "fold4", "fold5", "internal_test")]
    internal = np.flatnonzero(~is_external)
    classes = cohort.class_of()[internal]
    cursor = 0
    for cls in np.unique(classes):
        members = internal[classes == cls]
        members = rng.permutation(members)
        for idx in members:
            codes[idx] = groups[cursor % len(groups)]
            cursor += 1

    cfg = cohort.metadata.get("config", {})
    offset = cfg.get("external_offset", 0.0)
    extra = cfg.get("external_noise", 0.0)
    if is_external.any() and (offset or extra):
        shape = cohort.features[is_external].shape
        cohort.features[is_external] += offset + extra * rng.standard_normal(shape)

    cohort.centres = centres
    cohort.split_codes = codes
    cohort.metadata["split_seed"] = int(seed)
    cohort.metadata["external_centres"] = sorted(int(c) for c in external_centres)
    return cohort


class WeightedSampler:
    """Sampling with replacement, each subject weighted by 1/|its class|."""

    def __init__(self, classes, seed: int):
        classes = np.asarray(classes, dtype=np.int64)
        if classes.ndim != 1 or classes.size == 0:
            raise ConfigurationError("classes must be a nonempty 1-d array")
        labels, counts = np.unique(classes, return_counts=True)
        weights = np.zeros(classes.size)
        for lab, cnt in zip(labels, counts):
            weights[classes == lab] = 1.0 / cnt
        self.probs = weights / weights.sum()
        self.n = classes.size
        self.rng = np.random.default_rng(seed)

    def draw(self, k: int) -> np.ndarray:
        return self.rng.choice(self.n, size=k, replace=True, p=self.probs)

    def __iter__(self):
        while True:
            for idx in self.draw(1024):
                yield int(idx)


def weighted_sampler(class_sizes, seed: int):
    """Index stream over subjects laid out class-block by class-block."""
    sizes = [int(s) for s in class_sizes]
    if any(s <= 0 for s in sizes):
        raise ConfigurationError("every class must be nonempty")
    classes = np.repeat(np.arange(len(sizes)), sizes)
    return iter(WeightedSampler(classes, seed))


def followup_histogram(cohort: Cohort, bin_width_days: float):
    """Counts of non-survivor follow-up times in fixed-width bins."""
    if bin_width_days <= 0:
        raise ConfigurationError("bin width must be > 0")
    t = cohort.times[cohort.events == 1]
    if t.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(1)
    n_bins = int(np.floor(t.max() / bin_width_days)) + 1
    edges = np.arange(n_bins + 1) * bin_width_days
    counts, _ = np.histogram(t, bins=edges)
    return counts.astype(np.int64), edges


# ---------------------------------------------------------------------------
# fixture files: a JSON manifest plus one raw little-endian blob
#
# Blob layout: arrays are concatenated in manifest order (sorted by name),
# C-contiguous, little-endian, no padding. The manifest records dtype, shape,
# offset, and byte count per array plus a sha256 of the whole blob.

_ARRAY_COLUMNS = ("ids", "scan_times", "features", "latent", "times", "events",
                  "causes", "centres", "split_codes", "true_risks")


def save_fixture(cohort: Cohort, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    blob_parts = []
    entries = {}
    offset = 0
    for name in sorted(_ARRAY_COLUMNS):
        arr = getattr(cohort, name)
        le = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries[name] = {"dtype": arr.dtype.name, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)}
        blob_parts.append(raw)
        offset += len(raw)
    blob = b"".join(blob_parts)
    blob_path = os.path.join(directory, "cohort.bin")
    with open(blob_path, "wb") as f:
        f.write(blob)
    manifest = {
        "schema_version": FIXTURE_SCHEMA_VERSION,
        "blob": "cohort.bin",
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "arrays": entries,
        "metadata": cohort.metadata,
    }
    manifest_path = os.path.join(directory, "cohort.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest_path


def load_fixture(directory: str) -> Cohort:
    manifest_path = os.path.join(directory, "cohort.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no cohort manifest under {directory}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != FIXTURE_SCHEMA_VERSION:
        raise DataError(f"unsupported fixture schema {manifest.get('schema_version')!r}")
    blob_path = os.path.join(directory, manifest["blob"])
    with open(blob_path, "rb") as f:
        blob = f.read()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise DataError("fixture blob hash mismatch; file corrupted or edited")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).astype(entry["dtype"])
    metadata = dict(manifest["metadata"])
    metadata["fixture_sha256"] = digest
    return Cohort(metadata=metadata, **arrays)
