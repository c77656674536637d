"""
Read-only viewer over an experiment output directory (TAL_OUT_DIR)

Run:
> uvicorn tal_scale_wizard.src.apis.main:app --reload --port 8090
"""
import os
from typing import Dict, List, Optional
from fastapi import FastAPI, HTTPException
from fastapi.responses import HTMLResponse
from tal_scale_wizard import TalRootDirectory
from tal_scale_wizard.database.store_utils import ArtifactName, CheckpointStore, DatasetStore, ReportStore
from tal_scale_wizard.src.plot import VideoPlot
from tal_scale_wizard.src.snippet_data import Dataset

app = FastAPI()

# Cache -> dataset directory -> Dataset
datasets_cache: Dict[str, Dataset] = {}


def out_dir() -> str:
    return TalRootDirectory.env().get("TAL_OUT_DIR", os.path.join(TalRootDirectory.root_dir(), "out"))


def load_dataset(split: str) -> Dataset:
    """
    Args:
        split: dataset directory name under data/, eg. long-test
    """
    directory = ReportStore.inside(os.path.join(out_dir(), ArtifactName.DATA), split)
    if directory is None:
        raise HTTPException(status_code=404, detail=f"No dataset {split}")
    if directory not in datasets_cache:
        if not os.path.isfile(os.path.join(directory, ArtifactName.MANIFEST)):
            raise HTTPException(status_code=404, detail=f"No dataset {split}")
        datasets_cache[directory] = DatasetStore.load(directory)
    return datasets_cache[directory]


@app.get("/")
async def root() -> dict:
    return {"message": "Welcome to use TAL Scale Wizard API!", "out_dir": out_dir()}


@app.get("/api/reports/{name:path}")
async def get_report(name: str) -> Optional[dict | list]:
    """
    Get a JSON report by relative path or bare file name
    Args:
        name: eg. eval/stat-crd/report.json, resolved_config.json
    """
    if not name.endswith(".json"):
        raise HTTPException(status_code=400, detail="Only JSON reports are served")
    path = ReportStore.find(out_dir(), name)
    if path is None:
        raise HTTPException(status_code=404, detail=f"No report {name}")
    return ReportStore.read_json(path)


@app.get("/api/videos/{split}")
async def get_videos(split: str) -> List[str]:
    """
    List the video ids of a stored dataset
    """
    return [video.id for video in load_dataset(split).videos]


@app.get("/plot/{split}/{video_id}", response_class=HTMLResponse)
async def get_plot(split: str, video_id: str, checkpoint: str = "teacher"):
    """
    Get plot of one video under the teacher, base or smd checkpoint
    """
    names = {
        "teacher": ArtifactName.TEACHER_CHECKPOINT,
        "base": ArtifactName.BASE_CHECKPOINT,
        "smd": ArtifactName.SMD_CHECKPOINT,
    }
    if checkpoint not in names:
        raise HTTPException(status_code=400, detail=f"checkpoint must be one of {sorted(names)}")
    path = os.path.join(out_dir(), names[checkpoint])
    if not os.path.exists(path):
        raise HTTPException(status_code=404, detail=f"No {checkpoint} checkpoint")
    videos = {video.id: video for video in load_dataset(split).videos}
    if video_id not in videos:
        raise HTTPException(status_code=404, detail=f"No video {video_id} in {split}")
    try:
        model = CheckpointStore.load(path)
        return VideoPlot(videos[video_id], model).handle()
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))
