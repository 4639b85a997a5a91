# Schemas package - pydantic models for configs, reports and API payloads
