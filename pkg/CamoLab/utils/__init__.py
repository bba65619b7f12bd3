"""
Console, file-output and worker-pool helpers shared by the CamoLab orchestrators
"""

from utils.atomic_io import atomic_write_text, atomic_write_bytes, write_csv, sha256_file
from utils.console import banner, ok, warn, fail, stat, saved
from utils.workers import resolve_workers, map_ordered
