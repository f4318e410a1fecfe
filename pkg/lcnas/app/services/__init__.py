# Run-directory orchestration, one class per command family
