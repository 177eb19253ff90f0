import logging
import os

import httpx

from scotopic.stage_utils import run_with_retry_sync

logger = logging.getLogger(__name__)

MNIST_BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}


def download_file(url: str, dest_path: str, timeout: float = 300.0) -> str:
    """
    Streams a URL to dest_path. The file only appears once the download is complete.
    """
    os.makedirs(os.path.dirname(os.path.abspath(dest_path)), exist_ok=True)
    partial = dest_path + ".part"
    # httpx automatically respects HTTP_PROXY and HTTPS_PROXY environment variables
    with httpx.Client(timeout=timeout, follow_redirects=True) as client:
        with client.stream("GET", url) as response:
            response.raise_for_status()
            with open(partial, "wb") as f:
                for chunk in response.iter_bytes():
                    f.write(chunk)
    os.replace(partial, dest_path)
    return dest_path


def fetch_mnist(data_dir: str, base_url: str = MNIST_BASE_URL, force: bool = False) -> dict[str, str]:
    """
    Downloads the four MNIST IDX files into data_dir, skipping files already present.
    Returns the local path of each file by role.
    """
    paths = {}
    for role, name in MNIST_FILES.items():
        dest = os.path.join(data_dir, name)
        paths[role] = dest
        if os.path.exists(dest) and not force:
            logger.info(f"Skipping {name} (already present)")
            continue
        url = base_url.rstrip("/") + "/" + name
        logger.info(f"Downloading {url}")
        run_with_retry_sync(download_file, url, dest)
        print(f"Downloaded {name}")
    return paths
