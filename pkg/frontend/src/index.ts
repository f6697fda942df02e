export * from "./types.js";
export * from "./viewmodel.js";
export * from "./client.js";
export * from "./render.js";
