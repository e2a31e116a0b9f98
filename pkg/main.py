import sys
from pathlib import Path

# Allow `python main.py ...` from any working directory
project_root = Path(__file__).resolve().parent
sys.path.insert(0, str(project_root))

from app.cli import main

if __name__ == "__main__":
    sys.exit(main())
