import os
import sys
import subprocess
from dotenv import load_dotenv

print('Starting Provenancer...', file=sys.stderr)
load_dotenv()
result = subprocess.run([sys.executable, os.path.join('src', 'main.py'), *sys.argv[1:]])
sys.exit(result.returncode)
