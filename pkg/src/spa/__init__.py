"""Few-shot phase recognition on frozen vision-language embeddings.

Modules:

* :mod:`spa.embedding_store` -- embedding/label/reference file formats
* :mod:`spa.fewshot` -- text-blended linear classifier
* :mod:`spa.task_graph` -- phase-transition graphs and sequence synthesis
* :mod:`spa.diffusion` -- label-sequence diffusion and refinement
* :mod:`spa.tta` -- prediction streams, mutual-agreement adaptation, fusion
* :mod:`spa.synth_bench` -- synthetic embeddings with domain drift
* :mod:`spa.metrics`, :mod:`spa.pipeline`, :mod:`spa.cli` -- evaluation and orchestration
"""

__version__ = "0.1.0"
