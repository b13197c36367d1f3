"""Prompt templates and the shipped confounder descriptor list.

The descriptor file carries exactly 12 lines covering five appearance
dimensions: view quality (3), lighting (3), imaging technique (2),
viewing distance (2) and surface features (2).
"""

from __future__ import annotations

from importlib import resources

CLASS_NAMES = ("Polyps", "Tumors", "Inflam", "Nodules", "Cyst")

CLASS_TEMPLATE = "A {name} in an endoscopic image"
DOMAIN_TEMPLATE = "An endoscopy image with {descriptor}."
CLASS_DOMAIN_TEMPLATE = "A {name} with {descriptor}"

EXPECTED_DESCRIPTORS = 12


def default_domain_descriptors() -> list[str]:
    """Load the shipped 12-entry confounder descriptor list."""
    text = resources.files("mcdrl").joinpath("data/confounder_domains.txt").read_text("utf-8")
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if len(lines) != EXPECTED_DESCRIPTORS:
        raise ValueError(f"descriptor file must have {EXPECTED_DESCRIPTORS} lines, found {len(lines)}")
    return lines


def class_prompt(name: str) -> str:
    return CLASS_TEMPLATE.format(name=name)


def dictionary_prompts(descriptors: list[str] | None = None) -> list[str]:
    descriptors = default_domain_descriptors() if descriptors is None else descriptors
    return [DOMAIN_TEMPLATE.format(descriptor=d) for d in descriptors]


def class_domain_prompt(name: str, descriptor: str) -> str:
    return CLASS_DOMAIN_TEMPLATE.format(name=name, descriptor=descriptor)
