#!/usr/bin/env python3
"""
Surfel SLAM run viewer launcher
Puts the project root on the Python path and starts the Streamlit viewer.
Usage: streamlit run run_dashboard.py
"""

import os
import sys
from pathlib import Path

project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

os.environ.setdefault('STREAMLIT_SERVER_HEADLESS', 'true')
os.environ.setdefault('STREAMLIT_SERVER_PORT', '8501')

from surfel_slam.dashboard import main

if __name__ == "__main__":
    main()
