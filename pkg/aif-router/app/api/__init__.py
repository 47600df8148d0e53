# API 模組