"""Token vocabularies and latent sequences.

Every scheme's vocabulary carries the start marker, the end marker and
the '#' delimiter at fixed positions, followed by scheme-specific
payload tokens. A LatentSequence stores its tokens including the
terminal end marker; sequences cut off by a sampling length cap carry
no end marker and are flagged truncated so nothing downstream consumes
them silently.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ContractError, GrammarError

BOS = "<s>"
EOS = "</s>"
HASH = "#"
COMMA = ","
PIPE = "|"
DIGITS = tuple("0123456789")

SCHEMES = ("text", "bbox", "blob", "voken", "combined")


def mode_token(mode_id: str) -> str:
    return f"mode_{mode_id}"


def mode_id_of_token(token: str) -> str:
    if not token.startswith("mode_") or len(token) == len("mode_"):
        raise GrammarError(f"not a mode token: {token!r}")
    return token[len("mode_"):]


def count_token(n_bumps: int) -> str:
    return f"count_{int(n_bumps)}"


def voken_token(code_id: int) -> str:
    return f"v{int(code_id)}"


def voken_id_of_token(token: str) -> int:
    if not token.startswith("v") or not token[1:].isdigit():
        raise GrammarError(f"not a voken token: {token!r}")
    return int(token[1:])


@dataclass(frozen=True)
class LatentVocab:
    """Ordered token alphabet for one scheme; BOS/EOS/'#' always present."""

    scheme: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("vocabulary tokens must be distinct")
        for required in (BOS, EOS, HASH):
            if required not in self.tokens:
                raise ContractError(f"vocabulary missing required token {required!r}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise GrammarError(f"token {token!r} not in {self.scheme} vocabulary") from None

    def ids(self, tokens) -> list[int]:
        idx = self.index()
        try:
            return [idx[t] for t in tokens]
        except KeyError as exc:
            raise GrammarError(
                f"token {exc.args[0]!r} not in {self.scheme} vocabulary") from None

    def to_jsonable(self) -> dict:
        return {"scheme": self.scheme, "tokens": list(self.tokens)}

    @classmethod
    def from_jsonable(cls, blob: dict) -> "LatentVocab":
        return cls(scheme=blob["scheme"], tokens=tuple(blob["tokens"]))


def vocab_for_scheme(scheme: str, mode_ids=(), bump_counts=(), codebook_size: int = 0,
                     ) -> LatentVocab:
    """Build the vocabulary for one scheme.

    text needs mode_ids (mixture case) and/or bump_counts (canvas case);
    voken and combined need codebook_size; combined also needs
    bump_counts for its text segment.
    """
    base = [BOS, EOS, HASH]
    if scheme == "text":
        payload = [mode_token(m) for m in mode_ids] + [count_token(k) for k in bump_counts]
        if not payload:
            raise ContractError("text vocabulary needs mode_ids or bump_counts")
        return LatentVocab(scheme, tuple(base + payload))
    if scheme in ("bbox", "blob"):
        return LatentVocab(scheme, tuple(base + [COMMA] + list(DIGITS)))
    if scheme == "voken":
        if codebook_size < 1:
            raise ContractError("voken vocabulary needs codebook_size >= 1")
        return LatentVocab(scheme, tuple(base + [voken_token(i) for i in range(codebook_size)]))
    if scheme == "combined":
        if codebook_size < 1 or not bump_counts:
            raise ContractError("combined vocabulary needs codebook_size and bump_counts")
        payload = (
            [COMMA, PIPE] + list(DIGITS)
            + [count_token(k) for k in bump_counts]
            + [voken_token(i) for i in range(codebook_size)]
        )
        return LatentVocab(scheme, tuple(base + payload))
    raise ContractError(f"unknown scheme {scheme!r}")


@dataclass(frozen=True)
class LatentSequence:
    """Discrete latent z_1..z_N for one sample.

    tokens includes the terminal EOS (the BOS is implicit). A truncated
    sequence has no EOS and must never reach extractors, embeddings or
    metric comparisons.
    """

    scheme: str
    tokens: tuple[str, ...]
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}")
        if BOS in self.tokens:
            raise GrammarError("BOS is implicit and may not appear in tokens")
        if self.truncated:
            if EOS in self.tokens:
                raise GrammarError("truncated sequence may not contain EOS")
        else:
            if not self.tokens or self.tokens[-1] != EOS:
                raise GrammarError("complete sequence must end with EOS")
            if EOS in self.tokens[:-1]:
                raise GrammarError("EOS may only appear at the end")

    @property
    def payload(self) -> tuple[str, ...]:
        return self.tokens if self.truncated else self.tokens[:-1]

    def surface(self) -> str:
        """Space-joined payload, the editable surface form."""
        return " ".join(self.payload)

    @classmethod
    def from_payload(cls, scheme: str, payload) -> "LatentSequence":
        return cls(scheme=scheme, tokens=tuple(payload) + (EOS,))

    @classmethod
    def from_surface(cls, scheme: str, surface: str) -> "LatentSequence":
        payload = tuple(surface.split()) if surface.strip() else ()
        return cls.from_payload(scheme, payload)
