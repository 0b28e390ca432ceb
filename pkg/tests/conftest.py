import sys
from pathlib import Path

# make the sibling helper modules (oracles, gradcheck) importable
sys.path.insert(0, str(Path(__file__).parent))
