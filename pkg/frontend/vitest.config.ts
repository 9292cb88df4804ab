import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // the integration suite boots the Python service, which loads torch
    hookTimeout: 300_000,
    testTimeout: 300_000,
  },
});
