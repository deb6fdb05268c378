#!/usr/bin/env python3
"""
FedLPPA Simulator - Quick Start Script
This script checks your setup and runs a tiny federation end to end.
"""

import os
import sys
import tempfile
from pathlib import Path

from dotenv import load_dotenv

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))


# Color codes for terminal output
class Colors:
    GREEN = "\033[92m"
    YELLOW = "\033[93m"
    RED = "\033[91m"
    BLUE = "\033[94m"
    END = "\033[0m"
    BOLD = "\033[1m"


def print_header():
    """Print welcome header"""
    print(f"\n{Colors.BOLD}FedLPPA Simulator - Quick Start{Colors.END}")
    print("=" * 50)


def check_python_version():
    """Check if Python version is 3.10+"""
    print(f"\n{Colors.BLUE}Checking Python version...{Colors.END}")
    version = sys.version_info
    if version >= (3, 10):
        print(f"{Colors.GREEN}✓ Python {version.major}.{version.minor}.{version.micro} is supported{Colors.END}")
        return True
    print(f"{Colors.RED}✗ Python {version.major}.{version.minor} is not supported; use Python 3.10+{Colors.END}")
    return False


def check_dependencies():
    """Check if all required packages are installed"""
    print(f"\n{Colors.BLUE}Checking dependencies...{Colors.END}")

    required_packages = {
        "numpy": "numpy",
        "scipy": "scipy",
        "skimage": "scikit-image",
        "tqdm": "tqdm",
        "dotenv": "python-dotenv",
        "mcp": "mcp",
        "starlette": "starlette",
        "uvicorn": "uvicorn",
    }
    if sys.version_info < (3, 11):
        required_packages["tomli"] = "tomli"

    missing_packages = []
    for import_name, package_name in required_packages.items():
        try:
            __import__(import_name)
            print(f"{Colors.GREEN}✓ {package_name} is installed{Colors.END}")
        except ImportError:
            print(f"{Colors.RED}✗ {package_name} is not installed{Colors.END}")
            missing_packages.append(package_name)

    if missing_packages:
        print(f"\n{Colors.YELLOW}To install missing packages, run:{Colors.END}")
        print(f"pip install {' '.join(missing_packages)}")
        return False
    return True


def check_environment():
    """Report where datasets and runs will be written"""
    print(f"\n{Colors.BLUE}Checking environment variables...{Colors.END}")
    load_dotenv()
    for name, default in (("FEDLPPA_DATA_ROOT", "./data"), ("FEDLPPA_OUTPUT_ROOT", "./runs")):
        value = os.getenv(name)
        if value:
            print(f"{Colors.GREEN}✓ {name}={value}{Colors.END}")
        else:
            print(f"{Colors.YELLOW}ℹ {name} not set - using {default}{Colors.END}")
    return True


def smoke_run():
    """Synthesize a 16x16 two-site dataset and train FedLPPA for two rounds"""
    print(f"\n{Colors.BLUE}Running a two-round smoke federation...{Colors.END}")
    try:
        from cli import cmd_eval, cmd_train
        from config import ExperimentConfig
        from synth_data import default_4site_config, generate_federation

        with tempfile.TemporaryDirectory() as tmp:
            specs = default_4site_config(n_train=4, n_test=2, image_size=(16, 16))[:2]
            dataset = generate_federation(specs, seed=0, root=Path(tmp) / "data")
            cfg = ExperimentConfig(
                dataset_dir=str(dataset),
                output_dir=str(Path(tmp) / "run"),
                rounds=2,
                local_iters=1,
                batch=2,
                eval_every=1,
                channels_base=4,
                depth=2,
            )
            run_dir = cmd_train(cfg, progress=False)
            overall = cmd_eval(str(run_dir))["overall"]
        print(f"{Colors.GREEN}✓ Smoke run finished: dsc={overall['dsc']:.3f} hd95={overall['hd95']:.2f}{Colors.END}")
        return True
    except Exception as e:
        print(f"{Colors.RED}✗ Smoke run failed: {str(e)}{Colors.END}")
        return False


def main():
    """Run all checks"""
    print_header()

    checks = [
        ("Python Version", check_python_version),
        ("Dependencies", check_dependencies),
        ("Environment", check_environment),
    ]

    all_passed = True
    results = {}
    for name, check_func in checks:
        results[name] = check_func()
        all_passed = all_passed and results[name]

    if all_passed:
        results["Smoke Run"] = smoke_run()
        all_passed = results["Smoke Run"]

    print(f"\n{Colors.BOLD}Summary:{Colors.END}")
    print("=" * 50)
    for name, passed in results.items():
        status = f"{Colors.GREEN}✓ PASS{Colors.END}" if passed else f"{Colors.RED}✗ FAIL{Colors.END}"
        print(f"{name}: {status}")

    if all_passed:
        print(f"\n{Colors.GREEN}{Colors.BOLD}✅ The simulator is ready to use!{Colors.END}")
        print(f"\n{Colors.BLUE}Next steps:{Colors.END}")
        print("1. Generate the default dataset: python src/cli.py synth")
        print("2. Train FedLPPA: python src/cli.py train --rounds 100")
        print("3. Compare components: python src/cli.py ablate --grid table5")
    else:
        print(f"\n{Colors.RED}{Colors.BOLD}❌ Some checks failed. Please fix the issues above.{Colors.END}")
    return 0 if all_passed else 1


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print(f"\n{Colors.YELLOW}Setup cancelled by user{Colors.END}")
    except Exception as e:
        print(f"\n{Colors.RED}Error: {str(e)}{Colors.END}")
        sys.exit(1)
