"""Interest-unit based two-stage recommendation at desk scale.

Submodules:
    nn            dense kernels, attention, MLP, Adagrad, gradient checking
    marketplace   seeded synthetic C2C world and interaction-log simulator
    units         SPU / image-cluster / hierarchical-semantic interest units
    features      IU-level stats, cross features, click-sequence assembly
    models        DNN / DIN / IU-Boosted CTR rankers with explicit backprop
    metrics       AUC, GAUC, relative improvement, domain-split reports
    twostage      homepage + IU-page serving simulator and A/B comparisons
    pipeline      config, JSONL schemas, checkpoints
    cli           operator entry point (`iu4rec ...`)
"""

__version__ = "0.1.0"
