"""Corpus sampling, instruction wrapping, train/test split and the JSON-lines file.

Prior over planted findings: with probability 0.3 a record is "No Finding";
otherwise a primary finding is drawn uniformly from the 13 pathologies and
0, 1 or 2 extra co-findings (equally likely) are drawn uniformly from the rest.
Lateral findings get a uniform side (left / right / bilateral); every
pathology gets a uniform severity (small / moderate / large).

File format: one JSON object per line, keys sorted, fields exactly those of
:class:`CorpusRecord` plus ``format_version``. Images are row-major
little-endian float64 grids written as base-16 text.
"""
from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..errors import BadProportions, ConflictingFindings, CorpusValidationError, ValidationError
from .findings import (
    DISPLAY, LATERAL, NO_FINDING, PATHOLOGIES, FindingSpec, check_consistent, finding_phrase,
    finding_sentence, join_phrases, ordered, positive_names,
)
from .images import SIZE, render_image
from .notes import _STOP_RE, GenerationClient, RuleBasedClient, make_sections, synthesize_note

FORMAT_VERSION = 1
KINDS = ("caption", "instruction", "report", "summarization-pair")
DEFAULT_MIX = {"caption": 0.15, "instruction": 0.35, "report": 0.4, "summarization-pair": 0.10}
SPLITS = ("train", "test")
SECTION_KEYS = ("case_description", "case_presentation", "case_discussion", "findings_text", "impression_text")
RECORD_FIELDS = ("record_id", "image", "kind", "instruction", "target", "findings", "split", "sections")

NO_FINDING_PRIOR = 0.3
TEST_FRACTION = 0.2

CANONICAL_REPORT_PROMPT = "Describe the findings in this chest x-ray."
REPORT_PROMPTS = (
    CANONICAL_REPORT_PROMPT,
    "Write the findings section for this radiograph.",
    "What are the findings on this chest film?",
    "Generate a findings report for this image.",
    "Provide the radiology findings for this chest x-ray.",
    "Report the findings seen on this radiograph.",
    "Please describe what you observe in this chest x-ray.",
    "List the observations on this chest radiograph.",
)
CANONICAL_SUMMARY_PROMPT = "Summarize the following findings into an impression."
SUMMARY_PROMPTS = (
    CANONICAL_SUMMARY_PROMPT,
    "Write the impression for these findings.",
    "Based on the findings, provide the impression.",
    "Give a concise impression for the report below.",
    "Condense these findings into an impression section.",
    "What is the impression given these findings?",
    "Formulate the impression from the findings.",
    "Produce the impression section for the following findings.",
)
PRESENCE_PROMPTS = (
    "Is there {x} in this image?",
    "Does this chest x-ray show {x}?",
    "Can you see {x} on this radiograph?",
    "Is {x} present?",
    "Is there any evidence of {x}?",
    "Does the image demonstrate {x}?",
    "Would you report {x} on this film?",
    "Check this chest x-ray for {x}.",
)
ABNORMALITY_PROMPTS = (
    "What abnormalities are seen in this chest x-ray?",
    "What is abnormal on this radiograph?",
    "Name the abnormal findings in this image.",
    "Which abnormalities does this chest film show?",
    "List any abnormalities on this chest x-ray.",
    "What pathology is visible in this image?",
    "Identify the abnormal findings on this radiograph.",
    "What does this chest x-ray show?",
)
DESCRIPTION_PROMPTS = (
    "Describe the abnormal findings in this image.",
    "Describe any abnormality on this chest x-ray.",
    "Explain what is abnormal on this radiograph.",
    "Give a short description of the abnormal findings.",
    "Describe the key finding in this chest film.",
    "What abnormal findings would you describe here?",
    "Briefly describe the pathology in this image.",
    "Describe the most relevant findings of this radiograph.",
)
SIDE_PROMPTS = (
    "Which side is the {x} on?",
    "On which side is the {x}?",
    "Where is the {x} located?",
    "Is the {x} on the left or the right?",
    "Which hemithorax shows the {x}?",
    "What is the laterality of the {x}?",
    "Which lung side has the {x}?",
    "Tell me the side of the {x}.",
)


@dataclass
class CorpusRecord:
    record_id: str
    image: np.ndarray
    kind: str
    instruction: str
    target: str
    findings: list[FindingSpec]
    split: str
    sections: dict[str, str] | None = field(default=None)

    def labels(self) -> frozenset[str]:
        return frozenset(s.finding for s in self.findings)

    def to_json(self) -> str:
        obj = {
            "format_version": FORMAT_VERSION,
            "record_id": self.record_id,
            "image": np.ascontiguousarray(self.image, dtype="<f8").tobytes().hex(),
            "kind": self.kind,
            "instruction": self.instruction,
            "target": self.target,
            "findings": [s.to_dict() for s in self.findings],
            "split": self.split,
            "sections": self.sections,
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        obj = json.loads(line)
        return cls(
            record_id=obj["record_id"],
            image=np.frombuffer(bytes.fromhex(obj["image"]), dtype="<f8").reshape(SIZE, SIZE).astype(np.float64),
            kind=obj["kind"],
            instruction=obj["instruction"],
            target=obj["target"],
            findings=[FindingSpec.from_dict(d) for d in obj["findings"]],
            split=obj["split"],
            sections=obj["sections"],
        )


# ------------------------------------------------------------------ sampling


def sub_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent named stream derived from one integer seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *extra])


def sample_findings(rng: np.random.Generator) -> list[FindingSpec]:
    """One draw from the prior; the primary finding comes first."""
    if rng.random() < NO_FINDING_PRIOR:
        return [FindingSpec(NO_FINDING)]
    primary = int(rng.integers(len(PATHOLOGIES)))
    rest = [i for i in range(len(PATHOLOGIES)) if i != primary]
    n_co = int(rng.integers(3))
    picks = [primary] + [rest[i] for i in rng.choice(len(rest), size=n_co, replace=False)]
    out = []
    for i in picks:
        f = PATHOLOGIES[i]
        lat = str(rng.choice(["left", "right", "bilateral"])) if f in LATERAL else "none"
        out.append(FindingSpec(f, lat, str(rng.choice(["small", "moderate", "large"]))))
    return out


def prior_marginals() -> dict[str, float]:
    """Expected fraction of records carrying each finding under the prior."""
    pos = 1.0 - NO_FINDING_PRIOR
    # primary with prob 1/13, else co-finding: E[#co] = 1 spread over 12 others
    each = pos * (1 / len(PATHOLOGIES) + (1 - 1 / len(PATHOLOGIES)) * (1.0 / (len(PATHOLOGIES) - 1)))
    return {NO_FINDING: NO_FINDING_PRIOR, **{f: each for f in PATHOLOGIES}}


def check_mix(mix: Mapping[str, float]) -> dict[str, float]:
    unknown = set(mix) - set(KINDS)
    if unknown:
        raise BadProportions(f"unknown record kinds {sorted(unknown)}")
    if any(v < 0 for v in mix.values()):
        raise BadProportions("proportions must be nonnegative")
    if not math.isclose(sum(mix.values()), 1.0, abs_tol=1e-9):
        raise BadProportions(f"proportions sum to {sum(mix.values())}, not 1")
    return {k: float(mix.get(k, 0.0)) for k in KINDS}


def parse_mix(text: str) -> dict[str, float]:
    """``caption=0.25,instruction=0.5,...`` -> dict."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, val = part.partition("=")
        if not sep:
            raise BadProportions(f"bad mix entry {part!r}; expected kind=value")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise BadProportions(f"bad proportion {val!r} for {key!r}") from None
    return check_mix(out)


def kind_counts(n: int, mix: Mapping[str, float]) -> dict[str, int]:
    """Largest-remainder rounding of n * proportion."""
    raw = {k: n * mix[k] for k in KINDS}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    short = n - sum(counts.values())
    for k in sorted(KINDS, key=lambda k: (-(raw[k] - counts[k]), KINDS.index(k)))[:short]:
        counts[k] += 1
    return counts


# --------------------------------------------------------- instruction wrapping


def caption_text(specs: list[FindingSpec]) -> str:
    pos = [s for s in ordered(specs) if s.finding != NO_FINDING]
    if not pos:
        return "chest x-ray showing no acute abnormality."
    return f"chest x-ray showing {join_phrases([finding_phrase(s) for s in pos])}."


def _side_answer(spec: FindingSpec) -> str:
    name = DISPLAY[spec.finding]
    if spec.laterality == "bilateral":
        return f"The {name} is present on both sides."
    return f"The {name} is on the {spec.laterality} side."


def instruction_pair(specs: list[FindingSpec], rng: np.random.Generator) -> tuple[str, str]:
    """One conversational question/answer about the planted findings."""
    pos = [s for s in ordered(specs) if s.finding != NO_FINDING]
    present = set(positive_names(specs))
    lateral = [s for s in pos if s.finding in LATERAL]
    qtypes = ["presence", "abnormality", "description"] + (["side"] if lateral else [])
    q = qtypes[int(rng.integers(len(qtypes)))]
    if q == "presence":
        if pos and rng.random() < 0.5:
            spec = pos[int(rng.integers(len(pos)))]
            ask, answer = DISPLAY[spec.finding], f"Yes, there is {finding_phrase(spec)}."
        else:
            absent = [f for f in PATHOLOGIES if f not in present]
            f = absent[int(rng.integers(len(absent)))]
            ask, answer = DISPLAY[f], f"No, there is no {DISPLAY[f]}."
        return PRESENCE_PROMPTS[int(rng.integers(8))].format(x=ask), answer
    if q == "abnormality":
        if pos:
            answer = f"The image shows {join_phrases([finding_phrase(s) for s in pos])}."
        else:
            answer = "No acute abnormality is seen."
        return ABNORMALITY_PROMPTS[int(rng.integers(8))], answer
    if q == "description":
        if pos:
            answer = " ".join(finding_sentence(s) for s in pos)
        else:
            answer = "The heart size is within normal limits. The lungs are clear."
        return DESCRIPTION_PROMPTS[int(rng.integers(8))], answer
    spec = lateral[int(rng.integers(len(lateral)))]
    return SIDE_PROMPTS[int(rng.integers(8))].format(x=DISPLAY[spec.finding]), _side_answer(spec)


def summary_instruction(phrasing: str, findings_text: str) -> str:
    return f"{phrasing} Findings: {findings_text}"


def wrap(kind: str, specs: list[FindingSpec], note: Mapping[str, str], rng: np.random.Generator) -> tuple[str, str]:
    if kind == "caption":
        return "", caption_text(specs)
    if kind == "instruction":
        return instruction_pair(specs, rng)
    if kind == "report":
        return REPORT_PROMPTS[int(rng.integers(8))], note["findings_text"]
    if kind == "summarization-pair":
        return summary_instruction(SUMMARY_PROMPTS[int(rng.integers(8))], note["findings_text"]), note["impression_text"]
    raise ValueError(f"unknown kind {kind!r}")


# -------------------------------------------------------------------- building


def make_record(i: int, kind: str, seed: int, client: GenerationClient) -> CorpusRecord:
    rng = sub_rng(seed, "record", i)
    specs = sample_findings(rng)
    image = render_image(specs, int(rng.integers(2**31)))
    sections = make_sections(specs, rng)
    sections.update(synthesize_note(sections, client))
    instruction, target = wrap(kind, specs, sections, rng)
    return CorpusRecord(f"rec-{i:05d}", image, kind, instruction, target, specs, "train", sections)


def stratified_split(records: list[CorpusRecord], seed: int, test_fraction: float = TEST_FRACTION) -> None:
    """Assign splits in place, stratified by primary finding.

    Afterwards every finding seen at least 5 times overall also appears in test.
    """
    rng = sub_rng(seed, "split")
    strata: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        strata.setdefault(r.findings[0].finding, []).append(i)
    for key in sorted(strata):
        idx = strata[key]
        order = [idx[j] for j in rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx))) if len(idx) >= 2 else 0
        if len(idx) >= 2:
            n_test = max(1, n_test)
        for j, i in enumerate(order):
            records[i].split = "test" if j < n_test else "train"
    counts: dict[str, int] = {}
    for r in records:
        for f in r.labels():
            counts[f] = counts.get(f, 0) + 1
    for f in sorted(counts):
        if counts[f] < 5 or any(f in r.labels() for r in records if r.split == "test"):
            continue
        candidates = [r for r in records if r.split == "train" and f in r.labels()]
        candidates[int(rng.integers(len(candidates)))].split = "test"


def build_corpus(n_records: int, mix: Mapping[str, float] | None = None, seed: int = 0,
                 client: GenerationClient | None = None) -> list[CorpusRecord]:
    if n_records < 10:
        raise ValidationError("n_records must be at least 10")
    mix = check_mix(DEFAULT_MIX if mix is None else mix)
    client = client or RuleBasedClient()
    counts = kind_counts(n_records, mix)
    kinds = [k for k in KINDS for _ in range(counts[k])]
    kinds = [kinds[j] for j in sub_rng(seed, "kinds").permutation(n_records)]
    records = [make_record(i, kinds[i], seed, client) for i in range(n_records)]
    stratified_split(records, seed)
    return records


# ------------------------------------------------------------------ file I/O


def write_corpus(path: str | Path, records: Iterable[CorpusRecord]) -> None:
    records = sorted(records, key=lambda r: r.record_id)
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def read_corpus(path: str | Path, validate: bool = True) -> list[CorpusRecord]:
    path = Path(path)
    if not path.exists():
        raise CorpusValidationError(f"corpus file not found: {path}")
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusValidationError(f"{path}:{n}: not valid JSON ({e.msg})") from None
        if validate:
            _check_fields(obj, f"{path}:{n}")
        records.append(CorpusRecord.from_json(line))
    if validate:
        validate_records(records)
    return records


def _check_fields(obj: dict, where: str) -> None:
    if obj.get("format_version") != FORMAT_VERSION:
        raise CorpusValidationError(f"{where}: format_version must be {FORMAT_VERSION}")
    expected = set(RECORD_FIELDS) | {"format_version"}
    if set(obj) != expected:
        raise CorpusValidationError(f"{where}: fields {sorted(set(obj) ^ expected)} do not match the record schema")
    if len(obj["image"]) != SIZE * SIZE * 16 or re.fullmatch(r"[0-9a-f]*", obj["image"]) is None:
        raise CorpusValidationError(f"{where} ({obj.get('record_id')}): image is not a {SIZE}x{SIZE} float64 hex grid")


def validate_records(records: list[CorpusRecord]) -> None:
    seen = set()
    for r in records:
        where = r.record_id
        if r.record_id in seen:
            raise CorpusValidationError(f"{where}: duplicate record_id")
        seen.add(r.record_id)
        if r.kind not in KINDS:
            raise CorpusValidationError(f"{where}: unknown kind {r.kind!r}")
        if r.split not in SPLITS:
            raise CorpusValidationError(f"{where}: unknown split {r.split!r}")
        img = np.asarray(r.image)
        if img.shape != (SIZE, SIZE) or not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
            raise CorpusValidationError(f"{where}: image must be a {SIZE}x{SIZE} grid in [0, 1]")
        if not r.findings:
            raise CorpusValidationError(f"{where}: no findings listed")
        try:
            check_consistent(r.findings)
        except ConflictingFindings as e:
            raise CorpusValidationError(f"{where}: {e}") from None
        if not r.target.strip():
            raise CorpusValidationError(f"{where}: empty target")
        if _STOP_RE.search(r.target):
            raise CorpusValidationError(f"{where}: target contains non-observable (stop-pattern) text")
        if r.sections is not None and set(r.sections) - set(SECTION_KEYS):
            raise CorpusValidationError(f"{where}: unknown section keys")
        if r.kind in ("report", "summarization-pair"):
            secs = r.sections or {}
            if not secs.get("findings_text") or not secs.get("impression_text"):
                raise CorpusValidationError(f"{where}: {r.kind} record needs findings_text and impression_text")
            if r.kind == "summarization-pair" and secs["findings_text"] not in r.instruction:
                raise CorpusValidationError(f"{where}: summarization instruction must carry the findings text")
        if r.kind == "caption" and r.instruction:
            raise CorpusValidationError(f"{where}: caption records have no instruction")


def validate_corpus(path: str | Path) -> int:
    """Full validation pass over a corpus file; returns the record count."""
    return len(read_corpus(path, validate=True))
