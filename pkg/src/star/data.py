"""Datasets: synthetic generation, CSV ingestion, windowing, LOSO splits.

CSV schema (one time step per row, recordings contiguous):

    recording,subject,label,ch0,ch1,...,ch{P-1}

Labels are integer class indices. All recordings must agree on the channel
count. Standardization is per channel with statistics computed on the
training split only; the stats ride along in checkpoints so held-out data can
be standardized identically at evaluation time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CsvFormatError
from .glimpse import Window

STD_FLOOR = 1e-8


@dataclass
class Recording:
    """One contiguous activity bout: (time steps x channels) samples."""

    subject: str
    label: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray   # floored at STD_FLOOR


@dataclass
class DatasetMeta:
    n_positions: int = 3
    position_names: list = field(default_factory=list)
    channel_names: list = field(default_factory=list)


@dataclass
class Dataset:
    recordings: list
    stats: ChannelStats | None = None
    meta: DatasetMeta = field(default_factory=DatasetMeta)
    standardized: bool = False

    @property
    def n_channels(self) -> int:
        return self.recordings[0].samples.shape[1] if self.recordings else 0

    @property
    def n_classes(self) -> int:
        return 1 + max(r.label for r in self.recordings) if self.recordings else 0

    def subjects(self) -> list:
        seen = []
        for r in self.recordings:
            if r.subject not in seen:
                seen.append(r.subject)
        return seen


def window_recording(rec: Recording, window_len: int, overlap_fraction: float):
    """Slide a window over one recording.

    Stride = round-half-up(window_len * (1 - overlap)); windows start at
    0, stride, 2*stride, ... and each inherits the recording's label/subject.
    """
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    stride = int(math.floor(window_len * (1.0 - overlap_fraction) + 0.5))
    if stride < 1:
        raise ValueError(f"window_len {window_len} with overlap {overlap_fraction} "
                         f"gives stride {stride} < 1")
    t = rec.samples.shape[0]
    if t < window_len:
        return []
    count = (t - window_len) // stride + 1
    return [
        Window(rec.samples[i * stride:i * stride + window_len], rec.label, rec.subject)
        for i in range(count)
    ]


def windows_of(ds: Dataset, window_len: int, overlap_fraction: float = 0.5):
    out = []
    for rec in ds.recordings:
        out.extend(window_recording(rec, window_len, overlap_fraction))
    return out


def compute_stats(ds: Dataset) -> ChannelStats:
    stacked = np.concatenate([r.samples for r in ds.recordings], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return ChannelStats(mean, std)


def standardize(ds: Dataset, stats: ChannelStats | None = None) -> Dataset:
    """Z-score every channel. Stats come from `stats` (a training split's)
    or are computed from `ds` itself; re-standardizing is an error."""
    if ds.standardized:
        raise ValueError("standardize: dataset is already standardized")
    if stats is None:
        stats = compute_stats(ds)
    recs = [Recording(r.subject, r.label, (r.samples - stats.mean) / stats.std)
            for r in ds.recordings]
    return Dataset(recs, stats=stats, meta=ds.meta, standardized=True)


def loso_split(ds: Dataset, held_out: str):
    """Leave-one-subject-out: (train without `held_out`, test with only it)."""
    if held_out not in ds.subjects():
        raise KeyError(f"loso_split: unknown subject {held_out!r}; "
                       f"have {ds.subjects()}")
    train = [r for r in ds.recordings if r.subject != held_out]
    test = [r for r in ds.recordings if r.subject == held_out]
    return (Dataset(train, meta=ds.meta, standardized=ds.standardized),
            Dataset(test, meta=ds.meta, standardized=ds.standardized))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Desk-scale synthetic activity data.

    Each class owns a (channel band x time band) region; inside it every
    recording carries a sinusoid of the given amplitude on top of Gaussian
    noise. Classes pair up as channel-group x time-phase combinations
    (think: which body part moves, and when in the window), so both the
    spatial and the temporal attention axes carry class information. The
    sinusoid period is short so that coarse (pooled) glimpse scales average
    it away: only a finely-placed glimpse senses the signal.
    """

    n_classes: int = 4
    n_channels: int = 24
    window_len: int = 20                 # recordings are one window long by default
    recording_len: int = 20
    channel_band_width: int = 3
    time_band_width: int = 10            # two phases tile the default window
    amplitude: float = 5.0
    noise_std: float = 1.0
    dc_offset: float = 1.0               # engaged sensors shift baseline (orientation/gravity)
    period: float = 4.0
    recordings_per_class: int = 10       # per subject
    n_subjects: int = 8

    def channel_band(self, label: int) -> tuple[int, int]:
        # channel groups spread over the full range, first and last flush
        # with the channel edges; labels pair up (2g, 2g+1) -> group g
        n_groups = (self.n_classes + 1) // 2
        group = label // 2
        if n_groups == 1:
            start = (self.n_channels - self.channel_band_width) // 2
        else:
            start = round(group * (self.n_channels - self.channel_band_width)
                          / (n_groups - 1))
        return start, start + self.channel_band_width

    def time_band(self, label: int) -> tuple[int, int]:
        # even labels fire early in the window, odd labels late
        if label % 2 == 0:
            return 0, self.time_band_width
        return self.window_len - self.time_band_width, self.window_len

    def validate(self):
        if not 0 < self.channel_band_width <= self.n_channels:
            raise ValueError("channel band must fit inside the channels")
        if not 0 < self.time_band_width <= self.window_len:
            raise ValueError("time band must fit inside the window")
        if self.recording_len < self.window_len:
            raise ValueError("recording_len must be >= window_len")


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    """Deterministic class-balanced synthetic dataset."""
    spec.validate()
    rng = np.random.default_rng((seed, 101))
    recs = []
    for subject in range(spec.n_subjects):
        for label in range(spec.n_classes):
            c0, c1 = spec.channel_band(label)
            t0, t1 = spec.time_band(label)
            for _ in range(spec.recordings_per_class):
                samples = (rng.normal(size=(spec.recording_len, spec.n_channels))
                           * spec.noise_std)
                t = np.arange(t0, t1)
                wave = (spec.amplitude * np.sin(2.0 * math.pi * (t - t0) / spec.period)
                        + spec.dc_offset * spec.noise_std)
                samples[t0:t1, c0:c1] += wave[:, None]
                recs.append(Recording(f"subj{subject}", label, samples))
    meta = DatasetMeta(channel_names=[f"ch{i}" for i in range(spec.n_channels)])
    return Dataset(recs, meta=meta)


def band_energy_labels(ds: Dataset, spec: SynthSpec) -> np.ndarray:
    """Brute-force oracle: classify each recording by which class band holds
    the most mean squared energy. Used to certify the task is separable."""
    preds = np.empty(len(ds.recordings), dtype=np.int64)
    for i, rec in enumerate(ds.recordings):
        energies = []
        for label in range(spec.n_classes):
            c0, c1 = spec.channel_band(label)
            t0, t1 = spec.time_band(label)
            energies.append(np.mean(rec.samples[t0:t1, c0:c1] ** 2))
        preds[i] = int(np.argmax(energies))
    return preds


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------

def load_csv(path) -> Dataset:
    """Parse the documented CSV schema into a Dataset.

    Raises CsvFormatError with a line number for non-numeric cells, ragged
    rows, label changes inside a recording, or non-contiguous recording ids.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if header[:3] != ["recording", "subject", "label"]:
            raise CsvFormatError(
                f"{path}: line 1: header must start with recording,subject,label")
        channel_names = header[3:]
        n_channels = len(channel_names)
        if n_channels == 0:
            raise CsvFormatError(f"{path}: line 1: no channel columns")

        recs = []
        finished_ids = set()
        cur_id = None
        cur_subject = None
        cur_label = None
        cur_rows: list = []

        def flush():
            if cur_id is not None:
                recs.append(Recording(cur_subject, cur_label, np.array(cur_rows)))
                finished_ids.add(cur_id)

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + n_channels:
                raise CsvFormatError(
                    f"{path}: line {lineno}: expected {3 + n_channels} columns, got {len(row)}")
            rec_id, subject, label_text = row[0], row[1], row[2]
            try:
                label = int(label_text)
            except ValueError:
                raise CsvFormatError(
                    f"{path}: line {lineno}: label {label_text!r} is not an integer") from None
            if label < 0:
                raise CsvFormatError(f"{path}: line {lineno}: label must be >= 0, got {label}")
            try:
                values = [float(v) for v in row[3:]]
            except ValueError:
                raise CsvFormatError(
                    f"{path}: line {lineno}: non-numeric channel value in {row[3:]!r}") from None
            if rec_id != cur_id:
                if rec_id in finished_ids:
                    raise CsvFormatError(
                        f"{path}: line {lineno}: recording id {rec_id!r} reappears "
                        "after other recordings (rows must be contiguous)")
                flush()
                cur_id, cur_subject, cur_label, cur_rows = rec_id, subject, label, []
            else:
                if subject != cur_subject or label != cur_label:
                    raise CsvFormatError(
                        f"{path}: line {lineno}: subject/label changed inside recording {rec_id!r}")
            cur_rows.append(values)
        flush()
    if not recs:
        raise CsvFormatError(f"{path}: no data rows")
    meta = DatasetMeta(channel_names=channel_names)
    return Dataset(recs, meta=meta)


def save_csv(ds: Dataset, path):
    n_channels = ds.n_channels
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        names = ds.meta.channel_names or [f"ch{i}" for i in range(n_channels)]
        writer.writerow(["recording", "subject", "label"] + list(names))
        for i, rec in enumerate(ds.recordings):
            for row in rec.samples:
                writer.writerow([f"rec{i}", rec.subject, rec.label]
                                + [repr(float(v)) for v in row])
