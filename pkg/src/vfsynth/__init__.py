"""vfsynth: vertically federated GAN synthesis for tabular data.

Subpackages cover the dense-network primitives (:mod:`vfsynth.nn`), dataset
encoding and partitioning (:mod:`vfsynth.data`), the multi-party training
protocol (:mod:`vfsynth.fedgan`), the Gaussian mechanism and its RDP
accountant (:mod:`vfsynth.dp`), synthetic-data quality metrics
(:mod:`vfsynth.metrics`), leave-one-out membership-inference auditing
(:mod:`vfsynth.audit`), and the command-line front end (:mod:`vfsynth.cli`).
"""

__version__ = "0.1.0"
