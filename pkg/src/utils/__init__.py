# Utility modules - report files
