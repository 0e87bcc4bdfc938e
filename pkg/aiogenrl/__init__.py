"""Define the aiogenrl package."""
from .forge import DatasetManifest, ForgeConfig, async_forge, forge
from .harness import CompareConfig, async_compare, compare
