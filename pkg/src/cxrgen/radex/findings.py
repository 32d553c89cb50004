"""Finding categories and the report phrase bank.

Sentence patterns follow the style of normal-study phrases found in real chest
x-ray reports ("The heart size is within normal limits.", "No acute
cardiopulmonary abnormality."). Every positive sentence names its finding with
a phrase from the labeler lexicon so that planted labels and text agree.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConflictingFindings

FINDINGS = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Lesion",
    "Lung Opacity",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)
NO_FINDING = FINDINGS[0]
PATHOLOGIES = FINDINGS[1:]

LATERAL = frozenset({
    "Lung Lesion", "Lung Opacity", "Consolidation", "Pneumonia", "Atelectasis",
    "Pneumothorax", "Pleural Effusion", "Pleural Other", "Fracture",
})
LATERALITIES = ("left", "right", "bilateral", "none")
SEVERITIES = ("none", "small", "moderate", "large")

LUNG_FINDINGS = frozenset({"Lung Lesion", "Lung Opacity", "Edema", "Consolidation", "Pneumonia", "Atelectasis"})

# Noun phrase used in impressions, captions and yes/no questions.
DISPLAY = {
    "Enlarged Cardiomediastinum": "enlarged cardiomediastinum",
    "Cardiomegaly": "cardiomegaly",
    "Lung Lesion": "lung nodule",
    "Lung Opacity": "lung opacity",
    "Edema": "pulmonary edema",
    "Consolidation": "consolidation",
    "Pneumonia": "pneumonia",
    "Atelectasis": "atelectasis",
    "Pneumothorax": "pneumothorax",
    "Pleural Effusion": "pleural effusion",
    "Pleural Other": "pleural thickening",
    "Fracture": "rib fracture",
    "Support Devices": "endotracheal tube",
}

_DEGREE = {"small": "mild", "moderate": "moderate", "large": "severe", "none": "mild"}
_SIZE = {"small": "small", "moderate": "moderate", "large": "large", "none": "small"}
_FRACTURE = {"small": "nondisplaced", "moderate": "mildly displaced", "large": "displaced", "none": "nondisplaced"}


@dataclass(frozen=True)
class FindingSpec:
    finding: str
    laterality: str = "none"
    severity: str = "none"

    def __post_init__(self):
        if self.finding not in FINDINGS:
            raise ValueError(f"unknown finding {self.finding!r}")
        if self.laterality not in LATERALITIES:
            raise ValueError(f"unknown laterality {self.laterality!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")

    def to_dict(self) -> dict:
        return {"finding": self.finding, "laterality": self.laterality, "severity": self.severity}

    @classmethod
    def from_dict(cls, d: dict) -> "FindingSpec":
        return cls(d["finding"], d.get("laterality", "none"), d.get("severity", "none"))


def check_consistent(specs: list[FindingSpec]) -> None:
    names = [s.finding for s in specs]
    if NO_FINDING in names and len(set(names)) > 1:
        raise ConflictingFindings("'No Finding' cannot be combined with positive findings")
    if len(set(names)) != len(names):
        raise ConflictingFindings(f"duplicate finding in {names}")


def ordered(specs: list[FindingSpec]) -> list[FindingSpec]:
    return sorted(specs, key=lambda s: FINDINGS.index(s.finding))


def positive_names(specs: list[FindingSpec]) -> list[str]:
    return [s.finding for s in ordered(specs) if s.finding != NO_FINDING]


def _side(lat: str) -> str:
    return {"left": "left", "right": "right"}.get(lat, "right")


def finding_sentence(spec: FindingSpec) -> str:
    """Positive findings-section sentence for one planted finding."""
    f, lat, sev = spec.finding, spec.laterality, spec.severity
    both = lat == "bilateral"
    side = _side(lat)
    if f == "Enlarged Cardiomediastinum":
        return f"There is {_DEGREE[sev]} widening of the mediastinum."
    if f == "Cardiomegaly":
        return f"There is {_DEGREE[sev]} cardiomegaly."
    if f == "Edema":
        return f"There is {_DEGREE[sev]} pulmonary edema."
    if f == "Support Devices":
        return "An endotracheal tube is in place."
    if f == "Lung Lesion":
        if both:
            return f"There are {_SIZE[sev]} nodules in both upper lungs."
        return f"There is a {_SIZE[sev]} nodule in the {side} upper lung."
    if f == "Lung Opacity":
        if both:
            return f"There are {_SIZE[sev]} patchy opacities in both mid lungs."
        return f"There is a {_SIZE[sev]} patchy opacity in the {side} mid lung."
    if f == "Consolidation":
        where = "both lower lobes" if both else f"the {side} lower lobe"
        return f"There is {_SIZE[sev]} consolidation in {where}."
    if f == "Pneumonia":
        where = "both upper lobes" if both else f"the {side} upper lobe"
        return f"There is a {_SIZE[sev]} focus of pneumonia in {where}."
    if f == "Atelectasis":
        where = "both bases" if both else f"the {side} base"
        return f"There is {_DEGREE[sev]} atelectasis at {where}."
    if f == "Pneumothorax":
        if both:
            return f"There are {_SIZE[sev]} bilateral pneumothoraces."
        return f"There is a {_SIZE[sev]} {side} pneumothorax."
    if f == "Pleural Effusion":
        if both:
            return f"There are {_SIZE[sev]} bilateral pleural effusions."
        return f"There is a {_SIZE[sev]} {side} pleural effusion."
    if f == "Pleural Other":
        where = "bilaterally" if both else f"on the {side}"
        return f"There is {_DEGREE[sev]} pleural thickening {where}."
    if f == "Fracture":
        if both:
            return f"There are {_FRACTURE[sev]} bilateral rib fractures."
        return f"There is a {_FRACTURE[sev]} {side} rib fracture."
    raise ValueError(f"no sentence for {f}")


def normal_sentences(specs: list[FindingSpec]) -> list[str]:
    """Statements for the anatomy that carries no planted finding."""
    names = set(positive_names(specs))
    out = []
    if "Cardiomegaly" not in names:
        out.append("The heart size is within normal limits.")
    if "Enlarged Cardiomediastinum" not in names:
        out.append("The cardiomediastinal contours are within normal limits.")
    if not names & LUNG_FINDINGS:
        out.append("The lungs are clear.")
    eff, ptx = "Pleural Effusion" in names, "Pneumothorax" in names
    if not eff and not ptx:
        out.append("No pleural effusion or pneumothorax is seen.")
    elif not ptx:
        out.append("No pneumothorax is seen.")
    elif not eff:
        out.append("No pleural effusion is seen.")
    if "Fracture" not in names:
        out.append("No acute osseous abnormality.")
    return out


def observation_sentences(specs: list[FindingSpec]) -> list[str]:
    return [finding_sentence(s) for s in ordered(specs) if s.finding != NO_FINDING] + normal_sentences(specs)


def finding_phrase(spec: FindingSpec) -> str:
    """Short noun phrase used in captions and answers."""
    f, lat, sev = spec.finding, spec.laterality, spec.severity
    name = DISPLAY[f]
    if f in LATERAL:
        side = "bilateral" if lat == "bilateral" else _side(lat)
        adj = _FRACTURE[sev] if f == "Fracture" else (_DEGREE[sev] if f in ("Atelectasis", "Pleural Other") else _SIZE[sev])
        return f"{adj} {side} {name}"
    if f == "Support Devices":
        return name
    return f"{_DEGREE[sev]} {name}"


def join_phrases(items: list[str]) -> str:
    if not items:
        return ""
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + " and " + items[-1]
