"""Spatiotemporal multi-view image/text contrastive pretraining at desk scale.

Subpackage map:

    corpus     manifest ingestion, chronological sequence building, tokenization
    synthetic  deterministic toy corpus generator (images, reports, labels)
    pgm        binary PGM read/write
    encoders   view-routed image encoder and text encoder
    spatial    global and token/patch-level alignment losses
    temporal   cycle-consistency losses over study sequences
    trainer    batch composition, total loss, optimization loop, grad checking
    checkpoint flat binary parameter serialization
    svm        linear hinge-loss classifier used by the probes
    evals      downstream probes, ranking metrics, report emission
    cli        command-line entry point
"""

__version__ = "0.1.0"
