import sys
from pathlib import Path

# modules live flat in src/, as the entry point sees them
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
