"""
Genome Data for ConvNova

Reads and encodes nucleotide sequences, builds MLM-masked batches, and
generates the synthetic supervised tasks used for desk-scale checks.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import DataFormatError, PreconditionError
from src.tensor_engine import Rng, Tensor
from src.utils.windowing import SequenceWindower

logger = logging.getLogger(__name__)

ALPHABET = "ACGTN"
N_CODE = 4
TASKS = ("sequence", "token", "multilabel")
DEFAULT_LONGRANGE_MOTIFS = ("GATTCG", "CCTAGA")
MAX_SCRUB_ROUNDS = 1000
MAX_REGENERATIONS = 200

_ALPHABET_BYTES = np.frombuffer(ALPHABET.encode("ascii"), dtype=np.uint8)
_NORMALIZE = bytearray(b"N" * 256)
_CODE_OF = np.full(256, N_CODE, dtype=np.int64)
for _code, _symbol in enumerate(ALPHABET.encode("ascii")):
    _NORMALIZE[_symbol] = _symbol
    _NORMALIZE[ord(chr(_symbol).lower())] = _symbol
    _CODE_OF[_symbol] = _code
_NORMALIZE = bytes(_NORMALIZE)


def normalize_bases(raw: Union[str, bytes]) -> bytes:
    """Fold lowercase to uppercase and map every other symbol to N."""
    if isinstance(raw, str):
        raw = raw.encode("ascii", errors="replace")
    return bytes(raw).translate(_NORMALIZE)


@dataclass
class NucSeq:
    """A nucleotide sequence over {A, C, G, T, N}."""

    bases: bytes

    def __post_init__(self):
        self.bases = normalize_bases(self.bases)

    @classmethod
    def from_codes(cls, codes: Sequence[int]) -> "NucSeq":
        return cls(_ALPHABET_BYTES[np.asarray(codes, dtype=np.int64)].tobytes())

    @property
    def codes(self) -> np.ndarray:
        """Channel indices (A=0, C=1, G=2, T=3, N=4)."""
        return _CODE_OF[np.frombuffer(self.bases, dtype=np.uint8)]

    def find_all(self, motif: "NucSeq") -> List[int]:
        """Start positions of every (possibly overlapping) exact occurrence."""
        starts, position = [], self.bases.find(motif.bases)
        while position != -1:
            starts.append(position)
            position = self.bases.find(motif.bases, position + 1)
        return starts

    def __len__(self) -> int:
        return len(self.bases)

    def __getitem__(self, index: slice) -> "NucSeq":
        return NucSeq(self.bases[index])

    def __contains__(self, motif: "NucSeq") -> bool:
        return motif.bases in self.bases

    def __str__(self) -> str:
        return self.bases.decode("ascii")


def _as_nucseq(value: Union[NucSeq, str, bytes]) -> NucSeq:
    return value if isinstance(value, NucSeq) else NucSeq(value)


@dataclass
class FastaRecord:
    id: str
    seq: NucSeq

    def __post_init__(self):
        if not self.id:
            raise DataFormatError("FASTA record id must be nonempty")


@dataclass
class MaskedBatch:
    """
    MLM inputs with their prediction targets.

    ``targets`` hold base indices (A, C, G, T) where ``mask`` is true and 0
    elsewhere. Rows from ``mlm_mask`` have no batch axis; ``stack`` adds one.
    """

    inputs: Tensor
    targets: np.ndarray
    mask: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def stack(cls, rows: Sequence["MaskedBatch"]) -> "MaskedBatch":
        if not rows:
            raise PreconditionError("Cannot stack an empty list of masked rows")
        return cls(
            inputs=Tensor._wrap(np.stack([row.inputs.data for row in rows])),
            targets=np.stack([row.targets for row in rows]),
            mask=np.stack([row.mask for row in rows]),
        )


@dataclass
class LabeledSet:
    """
    Supervised examples.

    ``labels`` is [n] class indices for sequence tasks, [n, l] per-position
    indices for token tasks, and an [n, n_labels] 0/1 matrix for multilabel
    tasks (``n_classes`` is then the number of labels). Emptiness is allowed
    here (a 100% split leaves an empty validation set) and rejected by the
    training and evaluation entry points.
    """

    sequences: List[NucSeq]
    labels: np.ndarray
    n_classes: int
    task: str = "sequence"
    manifest: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.task not in TASKS:
            raise DataFormatError(f"Unknown task {self.task!r}; expected one of {TASKS}")
        if self.n_classes < 1:
            raise DataFormatError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.labels.shape[:1] != (len(self.sequences),):
            raise DataFormatError(f"{len(self.sequences)} sequences but labels of shape {self.labels.shape}")
        if self.labels.size:
            upper = 2 if self.task == "multilabel" else self.n_classes
            if self.labels.min() < 0 or self.labels.max() >= upper:
                raise DataFormatError(f"Labels must lie in [0, {upper}), got range "
                                      f"[{self.labels.min()}, {self.labels.max()}]")
        if self.task == "multilabel" and self.labels.size and self.labels.shape[1] != self.n_classes:
            raise DataFormatError(f"Multilabel matrix has {self.labels.shape[1]} columns, n_classes={self.n_classes}")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def length(self) -> int:
        lengths = {len(seq) for seq in self.sequences}
        if len(lengths) != 1:
            raise DataFormatError(f"Sequences must share one length, found {sorted(lengths)}")
        return lengths.pop()

    def inputs(self, indices: Optional[Sequence[int]] = None) -> Tensor:
        """One-hot batch [b, l, 5] for the given example indices (all by default)."""
        chosen = range(len(self)) if indices is None else indices
        return Tensor(np.stack([one_hot_codes(self.sequences[i].codes) for i in chosen]))

    def subset(self, indices: Sequence[int]) -> "LabeledSet":
        indices = [int(i) for i in indices]
        labels = self.labels[indices] if indices else self.labels[:0]
        return LabeledSet([self.sequences[i] for i in indices], labels, self.n_classes, self.task,
                          dict(self.manifest))

    def class_counts(self) -> np.ndarray:
        if self.task == "multilabel":
            return self.labels.sum(axis=0)
        return np.bincount(self.labels.reshape(-1), minlength=self.n_classes)


# ----------------------------------------------------------------------------
# Encoding
# ----------------------------------------------------------------------------


def one_hot_codes(codes: np.ndarray) -> np.ndarray:
    """One-hot rows [.., 5] for an array of channel indices."""
    return np.eye(len(ALPHABET))[np.asarray(codes, dtype=np.int64)]


def one_hot(seq: Union[NucSeq, str]) -> Tensor:
    """
    Encode a sequence with channel order (A, C, G, T, N).

    Args:
        seq: Normalized sequence

    Returns:
        Tensor [l, 5] with exactly one 1 per row
    """
    return Tensor(one_hot_codes(_as_nucseq(seq).codes))


def decode(encoded: Union[Tensor, np.ndarray]) -> NucSeq:
    """Inverse of ``one_hot``: argmax per row."""
    data = encoded.data if isinstance(encoded, Tensor) else np.asarray(encoded)
    if data.ndim != 2 or data.shape[-1] != len(ALPHABET):
        raise DataFormatError(f"decode expects [l, {len(ALPHABET)}], got {data.shape}")
    return NucSeq.from_codes(np.argmax(data, axis=-1))


# ----------------------------------------------------------------------------
# FASTA and corpus windowing
# ----------------------------------------------------------------------------


def parse_fasta(stream: Iterable[str]) -> List[FastaRecord]:
    """
    Parse FASTA text.

    Args:
        stream: Text lines (an open file or any iterable of strings)

    Returns:
        Records in file order, wrapped lines joined and bases normalized
    """
    records: List[FastaRecord] = []
    header: Optional[str] = None
    chunks: List[str] = []
    header_line = 0

    def flush() -> None:
        if header is None:
            return
        if not chunks:
            raise DataFormatError(f"FASTA record {header!r} (line {header_line}) has no sequence")
        records.append(FastaRecord(header, NucSeq("".join(chunks))))

    for line_number, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].split()[0] if line[1:].strip() else ""
            if not header:
                raise DataFormatError(f"FASTA header on line {line_number} has no id")
            header_line = line_number
            chunks = []
        elif header is None:
            raise DataFormatError(f"FASTA sequence data on line {line_number} before any header")
        else:
            chunks.append(line)
    flush()
    return records


def read_fasta(path: Union[str, Path]) -> List[FastaRecord]:
    """Parse a FASTA file from disk."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"FASTA file not found: {path}")
    with open(path, "r", encoding="ascii", errors="replace") as handle:
        records = parse_fasta(handle)
    logger.info("Read %d FASTA records (%d bases) from %s", len(records),
                sum(len(r.seq) for r in records), path)
    return records


def write_fasta(records: Sequence[FastaRecord], path: Union[str, Path], line_width: int = 80) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        for record in records:
            handle.write(f">{record.id}\n")
            text = str(record.seq)
            for start in range(0, len(text), line_width):
                handle.write(text[start:start + line_width] + "\n")


def window(seq: NucSeq, length: int, stride: int) -> List[NucSeq]:
    """
    Full windows of a sequence; the partial tail is dropped.

    Args:
        seq: Sequence to cut
        length: Window length >= 1
        stride: Step between starts >= 1

    Returns:
        floor((len - length) / stride) + 1 windows (0 when the sequence is shorter)
    """
    return SequenceWindower().window(seq, length, stride)


def corpus_windows(records: Sequence[FastaRecord], length: int, stride: Optional[int] = None) -> List[NucSeq]:
    """Window every record, keeping record order."""
    windower = SequenceWindower()
    stride = stride or length
    windows = windower.window_all([r.seq for r in records], length, 'sliding', stride)
    if not windows:
        raise DataFormatError(f"Corpus has no sequence of length >= {length}")
    return windows


# ----------------------------------------------------------------------------
# Masking
# ----------------------------------------------------------------------------


def mlm_mask(seq: NucSeq, rate: float, rng: Rng) -> MaskedBatch:
    """
    Mask exactly floor(rate * m) of the m A/C/G/T positions.

    Masked positions are replaced by N in the input encoding; N positions are
    never selected.

    Args:
        seq: Sequence to mask
        rate: Fraction of A/C/G/T positions to mask, 0 <= rate <= 1
        rng: Generator choosing positions uniformly without replacement

    Returns:
        MaskedBatch row (inputs [l, 5], targets [l], mask [l])
    """
    if not 0.0 <= rate <= 1.0:
        raise PreconditionError(f"Mask rate must lie in [0, 1], got {rate}")
    codes = seq.codes
    candidates = np.flatnonzero(codes < N_CODE)
    count = int(math.floor(rate * len(candidates) + 1e-9))

    mask = np.zeros(len(codes), dtype=bool)
    if count:
        chosen = candidates[np.sort(rng.choice(len(candidates), size=count, replace=False))]
        mask[chosen] = True
    masked_codes = np.where(mask, N_CODE, codes)
    targets = np.where(mask, codes, 0)
    return MaskedBatch(Tensor(one_hot_codes(masked_codes)), targets.astype(np.int64), mask)


# ----------------------------------------------------------------------------
# Synthetic tasks
# ----------------------------------------------------------------------------


def _random_codes(rng: Rng, length: int) -> np.ndarray:
    return rng.integers(0, 4, size=length).astype(np.int64)


def _scrub(codes: np.ndarray, motifs: Sequence[NucSeq], rng: Rng) -> np.ndarray:
    """Re-randomize every exact occurrence of the motifs until none is left."""
    for _ in range(MAX_SCRUB_ROUNDS):
        seq = NucSeq.from_codes(codes)
        hits = [(start, len(m)) for m in motifs for start in seq.find_all(m)]
        if not hits:
            return codes
        for start, size in hits:
            codes[start:start + size] = _random_codes(rng, size)
    raise DataFormatError("Could not remove accidental motif occurrences from the background")


def synth_motif(n: int, length: int, motif: Union[NucSeq, str], rng: Rng) -> LabeledSet:
    """
    Binary motif-presence task.

    Positives plant the motif at a uniform position in a uniform random
    background; negatives are backgrounds with every accidental occurrence
    re-randomized away.

    Args:
        n: Number of examples (n // 2 positives)
        length: Sequence length
        motif: Planted motif
        rng: Generator

    Returns:
        LabeledSet with shuffled order and binary labels
    """
    motif = _as_nucseq(motif)
    if n < 1:
        raise DataFormatError(f"n must be >= 1, got {n}")
    if not 1 <= len(motif) <= length:
        raise DataFormatError(f"Motif of length {len(motif)} cannot be planted in sequences of length {length}")

    n_pos = n // 2
    sequences: List[NucSeq] = []
    labels: List[int] = []
    for index in range(n):
        codes = _scrub(_random_codes(rng, length), [motif], rng)
        if index < n_pos:
            start = int(rng.integers(0, length - len(motif) + 1))
            codes[start:start + len(motif)] = motif.codes
        sequences.append(NucSeq.from_codes(codes))
        labels.append(int(index < n_pos))

    order = rng.permutation(n)
    manifest = {"generator": "motif", "n": n, "length": length, "motif": str(motif), "seed": rng.seed}
    logger.info("Generated motif task: %d examples of length %d", n, length)
    return LabeledSet([sequences[i] for i in order], np.asarray(labels)[order], 2, "sequence", manifest)


def has_ordered_pair(seq: NucSeq, first: NucSeq, second: NucSeq, gap_min: int) -> bool:
    """True iff some ``second`` starts at least gap_min positions after a ``first`` ends."""
    starts_first = seq.find_all(first)
    starts_second = seq.find_all(second)
    if not starts_first or not starts_second:
        return False
    return max(starts_second) >= min(starts_first) + len(first) + gap_min


def synth_longrange(n: int, length: int, gap_min: int, rng: Rng,
                    motifs: Tuple[str, str] = DEFAULT_LONGRANGE_MOTIFS) -> LabeledSet:
    """
    Long-range ordering task.

    Label 1 iff M1 occurs and M2 starts at least gap_min positions after
    that M1 ends. Negatives carry both motifs in the opposite order, so only
    a model whose receptive field spans the gap can tell the classes apart.

    Args:
        n: Number of examples (n // 2 positives)
        length: Sequence length
        gap_min: Minimum separation between the end of M1 and the start of M2
        rng: Generator
        motifs: (M1, M2)

    Returns:
        LabeledSet whose labels agree with ``has_ordered_pair`` on every example
    """
    first, second = (_as_nucseq(m) for m in motifs)
    size = len(first) + len(second)
    if n < 1 or gap_min < 0 or size + gap_min > length:
        raise DataFormatError(
            f"Infeasible long-range geometry: n={n}, motif lengths {len(first)}+{len(second)}, "
            f"gap_min={gap_min}, length={length}"
        )

    n_pos = n // 2
    sequences: List[NucSeq] = []
    labels: List[int] = []
    for index in range(n):
        label = int(index < n_pos)
        lead, trail = (first, second) if label else (second, first)
        for _ in range(MAX_REGENERATIONS):
            codes = _scrub(_random_codes(rng, length), [first, second], rng)
            lead_start = int(rng.integers(0, length - size - gap_min + 1))
            trail_start = int(rng.integers(lead_start + len(lead) + gap_min, length - len(trail) + 1))
            codes[lead_start:lead_start + len(lead)] = lead.codes
            codes[trail_start:trail_start + len(trail)] = trail.codes
            seq = NucSeq.from_codes(codes)
            if has_ordered_pair(seq, first, second, gap_min) == bool(label):
                break
        else:
            raise DataFormatError("Could not generate a long-range example matching its label")
        sequences.append(seq)
        labels.append(label)

    order = rng.permutation(n)
    manifest = {"generator": "longrange", "n": n, "length": length, "gap_min": gap_min,
                "motifs": [str(first), str(second)], "seed": rng.seed}
    logger.info("Generated long-range task: %d examples, gap >= %d", n, gap_min)
    return LabeledSet([sequences[i] for i in order], np.asarray(labels)[order], 2, "sequence", manifest)


def synth_kmer_corpus(total_length: int, rng: Rng, k: int = 6, vocab_size: int = 16) -> NucSeq:
    """
    Structured pretraining corpus: random concatenation of a small k-mer vocabulary.

    Inside a word the masked base is largely determined by its neighbours,
    so masked cross entropy can fall well below ln 4.

    Args:
        total_length: Corpus size in bases
        rng: Generator
        k: Word length
        vocab_size: Number of distinct words

    Returns:
        NucSeq of exactly total_length bases
    """
    if total_length < 1 or k < 1 or vocab_size < 1:
        raise DataFormatError("Corpus length, k and vocab_size must be >= 1")
    vocab = rng.integers(0, 4, size=(vocab_size, k))
    words = rng.integers(0, vocab_size, size=-(-total_length // k))
    return NucSeq.from_codes(vocab[words].reshape(-1)[:total_length])


# ----------------------------------------------------------------------------
# TSV datasets
# ----------------------------------------------------------------------------


def _parse_label(text: str, task: str, location: str) -> Any:
    try:
        if task == "sequence":
            return int(text)
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise DataFormatError(f"{location}: label {text!r} is not an integer{'' if task == 'sequence' else ' list'}")


def load_tsv(path: Union[str, Path], task: str = "sequence", n_classes: Optional[int] = None) -> LabeledSet:
    """
    Load a "sequence<TAB>label" dataset.

    Token labels are comma-separated per position and multilabel labels are
    comma-separated 0/1 flags. Shorter sequences of a sequence-level task are
    right-padded with N.

    Args:
        path: TSV file
        task: 'sequence', 'token' or 'multilabel'
        n_classes: Class count. When None the sorted distinct labels are mapped to
            0..K-1 (recorded as ``manifest["classes"]``); when given, labels are
            used as indices and a sequence task must contain every class

    Returns:
        LabeledSet
    """
    if task not in TASKS:
        raise DataFormatError(f"Unknown task {task!r}; expected one of {TASKS}")
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset file not found: {path}")

    sequences: List[NucSeq] = []
    labels: List[Any] = []
    with open(path, "r", encoding="ascii", errors="replace") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            location = f"{path}:{line_number}"
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise DataFormatError(f"{location}: expected 'sequence<TAB>label', got {len(parts)} field(s)")
            seq = NucSeq(parts[0])
            label = _parse_label(parts[1].strip(), task, location)
            if task == "token" and len(label) != len(seq):
                raise DataFormatError(f"{location}: {len(label)} token labels for {len(seq)} bases")
            sequences.append(seq)
            labels.append(label)

    if not sequences:
        raise DataFormatError(f"{path}: dataset has no rows")

    lengths = {len(seq) for seq in sequences}
    if len(lengths) > 1:
        if task == "token":
            raise DataFormatError(f"{path}: token tasks need equal sequence lengths, found {sorted(lengths)}")
        longest = max(lengths)
        sequences = [NucSeq(seq.bases + b"N" * (longest - len(seq))) for seq in sequences]
        logger.info("Padded %s sequences with N to length %d", path, longest)

    if task == "multilabel" and len({len(label) for label in labels}) != 1:
        raise DataFormatError(f"{path}: multilabel rows have different label counts")
    label_array = np.asarray(labels, dtype=np.int64)
    if label_array.min() < 0:
        raise DataFormatError(f"{path}: labels must be non-negative")
    manifest: Dict[str, Any] = {"source": str(path)}
    if task == "multilabel":
        n_classes = label_array.shape[1] if n_classes is None else n_classes
    elif n_classes is None:
        classes = np.unique(label_array)
        if not np.array_equal(classes, np.arange(len(classes))):
            logger.warning("%s: relabeled classes %s to 0..%d", path, classes.tolist(), len(classes) - 1)
        label_array = np.searchsorted(classes, label_array)
        n_classes = len(classes)
        manifest["classes"] = classes.tolist()
    else:
        present = set(np.unique(label_array).tolist())
        missing = sorted(set(range(n_classes)) - present)
        if max(present) >= n_classes:
            raise DataFormatError(f"{path}: label {max(present)} outside [0, {n_classes})")
        if missing and task == "sequence":
            raise DataFormatError(f"{path}: classes {missing} of {n_classes} do not occur in the data")
        if missing:
            logger.warning("%s: classes %s do not occur in the data", path, missing)
        manifest["classes"] = list(range(n_classes))
    return LabeledSet(sequences, label_array, n_classes, task, manifest)


def write_tsv(dataset: LabeledSet, path: Union[str, Path]) -> None:
    """Write a LabeledSet in the format read by ``load_tsv``."""
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        for seq, label in zip(dataset.sequences, dataset.labels):
            text = str(int(label)) if dataset.task == "sequence" else ",".join(str(int(v)) for v in label)
            handle.write(f"{seq}\t{text}\n")


def split(dataset: LabeledSet, fraction: float = 0.9, rng: Optional[Rng] = None) -> Tuple[LabeledSet, LabeledSet]:
    """
    Deterministic shuffled train/validation split.

    Args:
        dataset: Set to split
        fraction: Share of examples going to the training part
        rng: Generator for the shuffle (seed 0 when None)

    Returns:
        (train, valid); valid is empty for fraction 1.0
    """
    if not 0.0 < fraction <= 1.0:
        raise PreconditionError(f"Split fraction must lie in (0, 1], got {fraction}")
    rng = rng or Rng(0)
    order = rng.permutation(len(dataset))
    n_train = int(math.floor(fraction * len(dataset) + 1e-9))
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


def synth_from_manifest(manifest: Dict[str, Any]) -> Union[LabeledSet, NucSeq]:
    """
    Regenerate a synthetic dataset from its manifest (generator name, parameters, seed).

    Args:
        manifest: Mapping with 'generator', 'seed' and the generator's parameters

    Returns:
        LabeledSet for 'motif'/'longrange', NucSeq for 'corpus'
    """
    generator = manifest.get("generator")
    rng = Rng(int(manifest.get("seed", 0)))
    try:
        if generator == "motif":
            return synth_motif(int(manifest["n"]), int(manifest["length"]), manifest["motif"], rng)
        if generator == "longrange":
            motifs = tuple(manifest.get("motifs", DEFAULT_LONGRANGE_MOTIFS))
            return synth_longrange(int(manifest["n"]), int(manifest["length"]), int(manifest["gap_min"]), rng, motifs)
        if generator == "corpus":
            return synth_kmer_corpus(int(manifest["total_length"]), rng, int(manifest.get("k", 6)),
                                     int(manifest.get("vocab_size", 16)))
    except KeyError as exc:
        raise DataFormatError(f"Synthetic manifest for {generator!r} is missing parameter {exc}")
    raise DataFormatError(f"Unknown synthetic generator {generator!r}; expected motif, longrange or corpus")
