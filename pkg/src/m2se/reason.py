"""Pluggable scene description and emotion-reason inference backends.

The real pipeline calls two hosted models (a vision describer and a text
reasoner). Those are represented here by small interfaces plus offline
deterministic template implementations, so corpus builds and tests never
depend on external services. Live clients can implement the same protocols.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

from .records import SourceSample


@runtime_checkable
class SceneDescriber(Protocol):
    def describe(self, sample: SourceSample) -> str: ...


@runtime_checkable
class ReasonInferencer(Protocol):
    def infer(self, description: str, utterance: str) -> str: ...


class TemplateDescriber:
    """Offline describer: a pure template over the sample's own fields."""

    def describe(self, sample: SourceSample) -> str:
        parts = [f"The clip {sample.media_ref} shows a speaker"]
        if sample.emotion_label:
            parts.append(f"who looks {sample.emotion_label}")
        parts.append(f'saying: "{sample.utterance_text}".')
        if sample.dialogue_context:
            parts.append(
                f"The scene is part of a conversation with "
                f"{len(sample.dialogue_context)} utterances."
            )
        return " ".join(parts)


class TemplateReasoner:
    """Offline reasoner: composes the description and utterance verbatim."""

    def infer(self, description: str, utterance: str) -> str:
        return (
            f"{description} The speaker's words, \"{utterance}\", point to the "
            "immediate situation described in the scene as the trigger for "
            "this emotional state."
        )


def offline_generators() -> tuple[TemplateDescriber, TemplateReasoner]:
    """The default describer/reasoner pair used for offline corpus builds."""
    return TemplateDescriber(), TemplateReasoner()
