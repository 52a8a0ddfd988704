"""Discrete latent vocabularies, token grammars, oracle extractors and
autoregressive priors."""

from .codebook import KMeansCodebook, build_codebook
from .codecs import (
    BboxParams,
    BlobParams,
    decode_bbox,
    decode_blob,
    ellipse_fit,
    encode_bbox,
    encode_blob,
    join_combined,
    quantize_blob,
    split_combined,
    validate_sequence,
    voken_decode,
    voken_encode,
)
from .extract import canvas_patches, canvas_threshold_box, extract_latent
from .prior import (
    NeuralArPrior,
    TabularArPrior,
    ar_nll,
    ar_sample,
    embed_latents,
    train_neural_prior,
)
from .vocab import (
    BOS,
    EOS,
    SCHEMES,
    LatentSequence,
    LatentVocab,
    count_token,
    mode_id_of_token,
    mode_token,
    vocab_for_scheme,
)

__all__ = [
    "BOS", "EOS", "SCHEMES", "LatentSequence", "LatentVocab",
    "BboxParams", "BlobParams", "KMeansCodebook", "NeuralArPrior",
    "TabularArPrior", "ar_nll", "ar_sample", "build_codebook",
    "canvas_patches", "canvas_threshold_box", "count_token", "decode_bbox",
    "decode_blob", "ellipse_fit", "embed_latents", "encode_bbox",
    "encode_blob", "extract_latent", "join_combined", "mode_id_of_token",
    "mode_token", "quantize_blob", "split_combined", "train_neural_prior",
    "validate_sequence", "vocab_for_scheme", "voken_decode", "voken_encode",
]
