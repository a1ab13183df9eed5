import sys
from pathlib import Path

# allow cross-imports between test modules (shared oracles)
sys.path.insert(0, str(Path(__file__).parent))
