"""Clinical-note restructuring: case sections -> Findings + Impression.

``synthesize_note`` wraps the three case sections in the restructuring prompt
and hands it to a :class:`GenerationClient`. The default client is rule based
and offline; anything with ``call(prompt) -> str`` (an HTTP client for a hosted
LLM, say) can be swapped in.
"""
from __future__ import annotations

import re
from typing import Mapping, Protocol, runtime_checkable

import numpy as np

from ..errors import ClientFailure
from .findings import DISPLAY, NO_FINDING, FindingSpec, observation_sentences

PROMPT_PREAMBLE = (
    "You are an expert medical assistant AI capable of modifying clinical documents to user "
    "specifications. You make minimal changes to the original document to satisfy user requests. "
    "You never add information that is not already directly stated in the original document. "
    "Restructure the given text into a radiology report finding. Remove any information not "
    "directly observable from the current imaging study. For instance, remove any patient "
    "demographic data, past medical history, or comparison to prior images or studies. "
)
SECTION_TAGS = (
    ("case_description", "<Case Description> "),
    ("case_presentation", "<Case Presentation>"),
    ("case_discussion", "<Case Discussion>"),
)

# Sentences matching any of these are not observable on the current image.
STOP_PATTERNS = (
    r"year-old", r"years? old", r"history", r"prior", r"previous", r"previously", r"compared",
    r"comparison", r"male", r"female", r"man", r"woman", r"patient", r"presented", r"admitted",
)
_STOP_RE = re.compile(r"\b(?:" + "|".join(STOP_PATTERNS) + r")\b", re.IGNORECASE)
_NOTED_RE = re.compile(r"^(?P<subj>.+?)\s+(?:is|are)\s+noted\s+(?P<rest>.+?)\.?$", re.IGNORECASE)
_DX_RE = re.compile(r"\bcase of\s+(?P<dx>[a-z][a-z \-]*?)(?:\s+and\b|\s+with\b|[.,]|$)", re.IGNORECASE)
_OUTPUT_RE = re.compile(r"Findings:\s*(?P<f>.*?)\s*Impression:\s*(?P<i>.*)", re.DOTALL)

NORMAL_IMPRESSION = "No acute cardiopulmonary abnormality."
OTHERS_CLEAR = "No other acute cardiopulmonary abnormalities are identified."


@runtime_checkable
class GenerationClient(Protocol):
    client_id: str

    def call(self, prompt: str) -> str: ...


def build_prompt(sections: Mapping[str, str]) -> str:
    parts = [PROMPT_PREAMBLE, "", "[Input]: "]
    for key, tag in SECTION_TAGS:
        parts.append(tag)
        parts.append(sections.get(key, "").strip())
    parts += ["", "[Output]: ", ""]
    return "\n".join(parts)


def parse_prompt(prompt: str) -> dict[str, str]:
    body = prompt.split("[Input]:", 1)[-1].split("[Output]:", 1)[0]
    out = {}
    for n, (key, tag) in enumerate(SECTION_TAGS):
        tag = tag.strip()
        start = body.find(tag)
        if start < 0:
            out[key] = ""
            continue
        start += len(tag)
        end = len(body)
        for _, later in SECTION_TAGS[n + 1:]:
            pos = body.find(later.strip(), start)
            if pos >= 0:
                end = min(end, pos)
        out[key] = body[start:end].strip()
    return out


def _split_sentences(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        out += [s.strip() for s in re.split(r"(?<=[.!?])\s+", line) if s.strip()]
    return out


def _capitalize(s: str) -> str:
    return s[:1].upper() + s[1:]


class RuleBasedClient:
    """Deterministic restructuring by sentence filtering and templates.

    * description sentences that hit a stop pattern are dropped, the rest are
      kept verbatim as Findings;
    * the first "<X> is/are noted <Y>" sentence becomes "Chest X-ray demonstrates
      <x> <Y>", with ", suggestive of <diagnosis>" when the discussion names one;
    * the Impression lists the diagnosis plus every finding the labeler calls
      positive in the kept text, or states that nothing acute is seen.
    """

    client_id = "rule-based-v1"

    def call(self, prompt: str) -> str:
        from ..evaluation.labeler import label_report

        sections = parse_prompt(prompt)
        dx_match = _DX_RE.search(sections["case_discussion"])
        dx = dx_match.group("dx").strip().lower() if dx_match else ""

        kept = [s for s in _split_sentences(sections["case_description"]) if not _STOP_RE.search(s)]
        rewritten = False
        findings = []
        for s in kept:
            m = _NOTED_RE.match(s)
            if m and not rewritten:
                rewritten = True
                s = f"Chest X-ray demonstrates {m.group('subj')[:1].lower()}{m.group('subj')[1:]} {m.group('rest')}"
                if dx and dx not in s.lower():
                    s += f", suggestive of {dx}"
                s += "."
            findings.append(s)
        findings_text = " ".join(findings)

        names = [dx] if dx else []
        labels = label_report(findings_text)
        for f in DISPLAY:
            if labels.status(f) == "positive" and DISPLAY[f] not in names:
                names.append(DISPLAY[f])
        if names:
            impression = f"{_capitalize(_join(names))} present. {OTHERS_CLEAR}"
        else:
            impression = NORMAL_IMPRESSION
        return f"Findings: {findings_text}\nImpression: {impression}"


def _join(items: list[str]) -> str:
    return items[0] if len(items) == 1 else ", ".join(items[:-1]) + " and " + items[-1]


def synthesize_note(sections: Mapping[str, str], client: GenerationClient | None = None) -> dict[str, str]:
    if not sections or not any(str(v).strip() for v in sections.values()):
        raise ValueError("sections must not be empty")
    client = client or RuleBasedClient()
    prompt = build_prompt(sections)
    try:
        raw = client.call(prompt)
    except ClientFailure:
        raise
    except Exception as e:
        raise ClientFailure(f"{getattr(client, 'client_id', type(client).__name__)} failed: {e}", prompt) from e
    m = _OUTPUT_RE.search(raw or "")
    if not m:
        raise ClientFailure("client output lacks 'Findings:' and 'Impression:' sections", prompt)
    return {"findings_text": m.group("f").strip(), "impression_text": m.group("i").strip()}


# ------------------------------------------------------------ synthetic sections

_AGES = tuple(range(24, 88))
_SYMPTOMS = (
    "shortness of breath", "productive cough", "pleuritic chest pain", "fever and malaise",
    "dyspnea on exertion", "chest wall pain after a fall", "persistent dry cough", "routine screening",
)
_HISTORY = (
    "Past medical history of diabetes.", "History of hypertension.", "History of smoking.",
    "Past medical history of asthma.", "No significant past history.",
)
_COMPARISON = (
    "Compared with the prior study, the appearance is new.",
    "No prior images are available for comparison.",
    "Unchanged compared to previous radiograph.",
)


def make_sections(specs: list[FindingSpec], rng: np.random.Generator) -> dict[str, str]:
    """Case description / presentation / discussion for planted findings.

    ``specs[0]`` is the primary finding and is named in the discussion.
    """
    age = int(rng.choice(_AGES))
    sex = str(rng.choice(["male", "female"]))
    lines = [f"A {age}-year-old {sex} presented with {rng.choice(_SYMPTOMS)}."]
    lines.append(str(rng.choice(_HISTORY)))
    lines += observation_sentences(specs)
    if rng.random() < 0.5:
        lines.append(str(rng.choice(_COMPARISON)))
    presentation = f"{_capitalize(str(rng.choice(_SYMPTOMS)))} for {int(rng.integers(1, 15))} days."
    if specs and specs[0].finding != NO_FINDING:
        discussion = f"This is a case of {DISPLAY[specs[0].finding]}."
    else:
        discussion = "This is a normal chest radiograph."
    return {
        "case_description": "\n".join(lines),
        "case_presentation": presentation,
        "case_discussion": discussion,
    }
