#!/usr/bin/env python3
"""
Run all tests with a clean run environment
"""

import os
import subprocess
import sys


def main():
    # Keep PRTM_* settings from the developer's shell out of the tests
    for name in list(os.environ):
        if name.startswith("PRTM_"):
            del os.environ[name]

    print("🧪 Running ALL tests with coverage...")
    print("=" * 60)

    cmd = [
        sys.executable, "-m", "pytest",
        "tests/",
        "--cov=app",
        "--cov-report=term-missing",
        "--cov-report=html",
        "-v",
        "--tb=short",
    ]
    if "--performance" in sys.argv:
        cmd += ["-m", "performance"]

    result = subprocess.run(cmd)

    if result.returncode == 0:
        print("\n✅ All tests passed!")
        print("📊 Check htmlcov/index.html for detailed coverage report")
    else:
        print("\n❌ Some tests failed")

    return result.returncode


if __name__ == "__main__":
    sys.exit(main())
