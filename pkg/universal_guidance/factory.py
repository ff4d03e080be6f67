"""
Guidance Factory

Factory pattern for creating guidance library entries and specs by kind name.
"""

from typing import Any, Dict, List, Optional
import logging

from .errors import InvalidRangeError
from .guidance import (
    CLASSIFIER_KINDS,
    COMPONENT_CLASSIFIER,
    DEFAULT_BACKWARD_STEP_SIZE,
    DEFAULT_BACKWARD_STEPS,
    EMBEDDING_MATCH,
    LABEL_FIELD,
    LINEAR_INVERSE,
    NOISY_CLASSIFIER,
    GuidanceLibraryEntry,
    GuidanceSpec,
    make_component_classifier,
    make_embedding_match,
    make_label_field,
    make_linear_inverse,
    make_noisy_classifier,
)
from .models import GaussianMixture

logger = logging.getLogger(__name__)

KIND_ALIASES = {
    "component-classifier": COMPONENT_CLASSIFIER,
    "classifier": COMPONENT_CLASSIFIER,
    "noisy-classifier": NOISY_CLASSIFIER,
    "noisy": NOISY_CLASSIFIER,
    "linear-inverse": LINEAR_INVERSE,
    "inpainting": LINEAR_INVERSE,
    "label-field": LABEL_FIELD,
    "segmentation": LABEL_FIELD,
    "embedding-match": EMBEDDING_MATCH,
    "embedding": EMBEDDING_MATCH,
}


class GuidanceFactory:
    """Factory for creating guidance library entries."""

    @staticmethod
    def canonical_kind(kind: str) -> str:
        """
        Resolve a kind name or alias.

        Raises:
            InvalidRangeError: If the kind is unknown
        """
        key = str(kind).lower().replace("_", "-")
        if key not in KIND_ALIASES:
            raise InvalidRangeError(
                f"Unknown guidance kind: {kind}. "
                f"Available: {', '.join(GuidanceFactory.list_kinds())}"
            )
        return KIND_ALIASES[key]

    @staticmethod
    def create_entry(
        kind: str, gmm: Optional[GaussianMixture] = None, **params
    ) -> GuidanceLibraryEntry:
        """
        Create a guidance library entry.

        Args:
            kind: Guidance kind name (aliases accepted)
            gmm: World mixture, required by both component classifiers
            **params: Kind-specific arguments

        Returns:
            GuidanceLibraryEntry

        Raises:
            InvalidRangeError: If kind is unknown or parameters are missing
        """
        kind = GuidanceFactory.canonical_kind(kind)

        try:
            if kind == COMPONENT_CLASSIFIER:
                if gmm is None:
                    raise InvalidRangeError("component-classifier needs the world mixture")
                return make_component_classifier(
                    gmm, temperature=params.get("temperature", 1.0), target=params.get("target")
                )

            elif kind == NOISY_CLASSIFIER:
                if gmm is None:
                    raise InvalidRangeError("noisy-classifier needs the world mixture")
                return make_noisy_classifier(gmm, target=params.get("target"))

            elif kind == LINEAR_INVERSE:
                return make_linear_inverse(params["A"], params["y"])

            elif kind == LABEL_FIELD:
                return make_label_field(
                    params["labels"], temperature=params.get("temperature", 1.0)
                )

            else:
                return make_embedding_match(
                    params["W"], params["target"], mode=params.get("mode", "cosine")
                )
        except KeyError as e:
            raise InvalidRangeError(f"{kind} guidance is missing parameter {e.args[0]!r}") from e

    @staticmethod
    def create_spec(
        kind: str,
        gmm: Optional[GaussianMixture] = None,
        w: float = 1.0,
        m: int = DEFAULT_BACKWARD_STEPS,
        step_size: float = DEFAULT_BACKWARD_STEP_SIZE,
        weight: float = 1.0,
        name: Optional[str] = None,
        **params,
    ) -> GuidanceSpec:
        """
        Create a ready-to-sample guidance spec.

        Args:
            kind: Guidance kind name
            gmm: World mixture (component classifiers only)
            w: Forward strength; s(t) = w * sqrt(1 - alpha_t)
            m: Backward gradient steps
            step_size: Backward step size
            weight: Mixing weight of the forward term
            name: Display name
            **params: Kind-specific arguments
        """
        entry = GuidanceFactory.create_entry(kind, gmm=gmm, **params)
        if entry.kind in CLASSIFIER_KINDS and entry.prompt is None:
            raise InvalidRangeError(f"{entry.kind} guidance needs a target class")
        spec = GuidanceSpec.from_entry(
            entry, w=w, backward_steps=m, backward_step_size=step_size, weight=weight, name=name
        )
        logger.debug(f"Created {entry.kind} guidance (w={w}, m={m})")
        return spec

    @staticmethod
    def list_kinds() -> List[str]:
        """
        List all available guidance kinds.

        Returns:
            List of kind names
        """
        return [
            COMPONENT_CLASSIFIER, NOISY_CLASSIFIER, LINEAR_INVERSE, LABEL_FIELD, EMBEDDING_MATCH
        ]

    @staticmethod
    def aliases() -> Dict[str, str]:
        return dict(KIND_ALIASES)


def create_guidance(kind: str, **kwargs: Any) -> GuidanceSpec:
    """Convenience function wrapping GuidanceFactory.create_spec."""
    return GuidanceFactory.create_spec(kind, **kwargs)
