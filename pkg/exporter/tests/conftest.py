import os

# Resolve models from the local Hugging Face cache only, so tests are
# deterministic and network-free. Pre-fetch the default model once if needed.
os.environ.setdefault("HF_HUB_OFFLINE", "1")
