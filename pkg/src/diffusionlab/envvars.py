"""Environment variable names honored by the CLI (and nothing else)."""

ENV_OUTPUT_DIR = "DIFFUSIONLAB_OUTPUT_DIR"
ENV_THREADS = "DIFFUSIONLAB_THREADS"
