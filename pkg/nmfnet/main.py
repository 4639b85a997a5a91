from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from . import __version__
from .config import settings
from .log import configure_logging
from .routes import factorize, gradcheck, presets

configure_logging()

# Create FastAPI app
app = FastAPI(
    title=settings.API_TITLE,
    description="NMF layers with approximate backpropagation: factorization, gradient checks, model presets",
    version=__version__,
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(factorize.router)
app.include_router(gradcheck.router)
app.include_router(presets.router)


@app.get("/")
async def root():
    """Root endpoint."""
    return {"message": "nmfnet API", "docs": "/docs", "version": __version__}


@app.get("/health")
async def health():
    """Health check endpoint."""
    return {"status": "healthy"}
