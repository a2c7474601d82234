"""Prompt templates for image description, aligner summaries, and label prediction.

Bodies are stored verbatim, including the stray space before the comma in the
Amazon image-description prompts. Image positions are the literal ``<image>``
marker; `PromptBundle.from_rendered` turns each marker into an image segment.
"""

from __future__ import annotations

import string
from collections.abc import Mapping
from dataclasses import dataclass

from mmgbench.config import DOMAINS
from mmgbench.errors import ConfigInvalid, UnboundSlot, UnknownDomain

TEMPLATE_KINDS: tuple[str, ...] = (
    "image_description",
    "aligner_summary",
    "aligner_summary_structural",
    "predictor",
    "predictor_structural",
)
PREDICTOR_KINDS = ("predictor", "predictor_structural")
SLOTS = (
    "text_information",
    "image_summary",
    "neighbor_text",
    "neighbor_image_summary",
    "candidates",
    "truth_label",
)
NEIGHBOR_CLAUSE = "{neighbor_clause}"
SFT_SUFFIX = "\n\nAssistant: {truth_label}"


@dataclass(slots=True, frozen=True)
class PromptTemplate:
    dataset_domain: str
    kind: str
    body: str
    neighbor_clause: str | None = None
    fallback: str | None = None

    @property
    def is_predictor(self) -> bool:
        return self.kind in PREDICTOR_KINDS


@dataclass(slots=True, frozen=True)
class _Wording:
    item: str
    description_dataset: str
    summary_dataset: str
    structural_dataset: str


_WORDING: dict[str, _Wording] = {
    "movies": _Wording("a movie", "Amazon movies dataset ", "Amazon Movies", "Amazon movies"),
    "toys": _Wording("a toy", "Amazon toys dataset ", "Amazon toys", "Amazon toys"),
    "grocery": _Wording("a grocery", "Amazon grocery dataset ", "Amazon grocery", "Amazon grocery"),
    "cds": _Wording("a CD", "Amazon CD dataset ", "Amazon CD", "Amazon CD"),
    "arts": _Wording("an artwork", "Amazon Art dataset ", "Amazon Art", "Amazon Art"),
    "reddit": _Wording("a post", "Reddit dataset", "Reddit", "Reddit"),
}


def _amazon(domain: str, wording: _Wording) -> dict[str, PromptTemplate]:
    return {
        "image_description": PromptTemplate(
            domain,
            "image_description",
            f"<image> Given an image of {wording.item} from the {wording.description_dataset}, generate a concise "
            "and detailed summary. Focus on describing key visual concepts. Ensure the summary is informative "
            "and useful for understanding the product as described in user reviews, without losing critical "
            "details or introducing unnecessary information.",
        ),
        "aligner_summary": PromptTemplate(
            domain,
            "aligner_summary",
            f"Given the text information of a product from the {wording.summary_dataset} dataset: "
            "{text_information}. Image summary: {image_summary} Questions: Using the title, description, and "
            "image summary of the product provided above, create an informative and concise description that "
            "effectively highlights the product's key features.",
        ),
        "aligner_summary_structural": PromptTemplate(
            domain,
            "aligner_summary_structural",
            f"Given the text information of a product from the {wording.structural_dataset} dataset: "
            "{text_information}. Image summary: {image_summary}. Also given the information of co-purchased or "
            "co-reviewed products: " + NEIGHBOR_CLAUSE + " Questions: Using the product's title, description, "
            "and image summary provided above, along with any co-purchase or co-review data, generate a concise "
            "yet informative description of the product.",
            neighbor_clause="text information: {neighbor_text}, image summary: {neighbor_image_summary}",
            fallback="No co-purchased or co-reviewed product information is available.",
        ),
        "predictor": PromptTemplate(
            domain,
            "predictor",
            "Given the target product information on Amazon:\n"
            "Picture: <image>\n"
            "Title and description: {text_information}.\n"
            "Question: Based on the target product's picture, title, and description, which category does the "
            "target product belong to? Choose from the following options: {candidates}.",
        ),
        "predictor_structural": PromptTemplate(
            domain,
            "predictor_structural",
            "Given the target product information on Amazon:\n"
            "Picture: <image>\n"
            "Title and description: {text_information}.\n"
            "Co-purchased or co-reviewed products: {neighbor_text}.\n"
            "Question: Based on the target product's picture, title, description, and related products, which "
            "category does the target product belong to? Choose from the following options: {candidates}.",
        ),
    }


def _reddit(wording: _Wording) -> dict[str, PromptTemplate]:
    return {
        "image_description": PromptTemplate(
            "reddit",
            "image_description",
            f"<image> Given an image of {wording.item} from the {wording.description_dataset}, generate a concise "
            "and detailed summary. Focus on describing key visual concepts. Ensure the summary is informative "
            "and useful for understanding the post as described in the caption, without losing critical "
            "details or introducing unnecessary information.",
        ),
        "aligner_summary": PromptTemplate(
            "reddit",
            "aligner_summary",
            f"Given the text information of a post from the {wording.summary_dataset} dataset: "
            "{text_information}. Image summary: {image_summary} Questions: Using the caption and image summary "
            "of the post provided above, create an informative and concise description that effectively "
            "highlights the post's key features.",
        ),
        "aligner_summary_structural": PromptTemplate(
            "reddit",
            "aligner_summary_structural",
            f"Given the text information of a post from the {wording.structural_dataset} dataset: "
            "{text_information}. Image summary: {image_summary}. Also given the information of co-commented "
            "posts: " + NEIGHBOR_CLAUSE + " Questions: Using the post's caption and image summary provided "
            "above, along with any co-commented data, generate a concise yet informative description of the post.",
            neighbor_clause="text information: {neighbor_text}, image summary: {neighbor_image_summary}",
            fallback="No co-commented post information is available.",
        ),
        "predictor": PromptTemplate(
            "reddit",
            "predictor",
            "Given the target post information on Reddit:\n"
            "Picture: <image>\n"
            "Caption: {text_information}.\n"
            "Question: Based on the target post's picture and caption, which category does the target post "
            "belong to? Choose from the following options: {candidates}.",
        ),
        "predictor_structural": PromptTemplate(
            "reddit",
            "predictor_structural",
            "Given the target post information on Reddit:\n"
            "Picture: <image>\n"
            "Caption: {text_information}.\n"
            "Co-commented posts: {neighbor_text}.\n"
            "Question: Based on the target post's picture, caption, and related posts, which category does the "
            "target post belong to? Choose from the following options: {candidates}.",
        ),
    }


TEMPLATES: dict[tuple[str, str], PromptTemplate] = {}
for _domain, _wording in _WORDING.items():
    _table = _reddit(_wording) if _domain == "reddit" else _amazon(_domain, _wording)
    for _kind, _template in _table.items():
        TEMPLATES[(_domain, _kind)] = _template

# Neighbor entry labels used when assembling predictor neighbor blocks.
NEIGHBOR_TEXT_LABEL = {domain: ("Caption" if domain == "reddit" else "Title") for domain in DOMAINS}


def get_template(domain: str, kind: str) -> PromptTemplate:
    if domain not in _WORDING:
        raise UnknownDomain(f"no templates for domain {domain!r}; expected one of {DOMAINS}")
    if kind not in TEMPLATE_KINDS:
        raise ConfigInvalid(f"unknown template kind {kind!r}; expected one of {TEMPLATE_KINDS}")
    return TEMPLATES[(domain, kind)]


def template_slots(body: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(body) if name]


def render_template(template: PromptTemplate, bindings: Mapping[str, str | None]) -> str:
    """Exact slot substitution; no trimming or re-wrapping.

    Structural aligner templates render their fallback sentence when neither
    neighbor slot is bound. Predictor templates gain the ``Assistant:`` suffix
    iff ``truth_label`` is bound.
    """
    if template.dataset_domain not in _WORDING:
        raise UnknownDomain(f"no templates for domain {template.dataset_domain!r}")
    body = template.body
    if template.neighbor_clause is not None:
        neighbor_bound = [bindings.get(slot) is not None for slot in ("neighbor_text", "neighbor_image_summary")]
        clause = template.neighbor_clause if any(neighbor_bound) else (template.fallback or "")
        body = body.replace(NEIGHBOR_CLAUSE, clause)
    if template.is_predictor and bindings.get("truth_label") is not None:
        body = body + SFT_SUFFIX
    values: dict[str, str] = {}
    for slot in template_slots(body):
        value = bindings.get(slot)
        if value is None:
            raise UnboundSlot(f"slot {slot!r} of {template.dataset_domain}/{template.kind} is unbound")
        values[slot] = str(value)
    return body.format_map(values)
