import sys
from pathlib import Path

# make the shared fixture helpers importable as `fixtures`
sys.path.insert(0, str(Path(__file__).parent))
