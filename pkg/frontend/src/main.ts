import { SeeSayClient } from "./api.js";
import { ConsoleApp } from "./app.js";

// Same-origin by default (served from /console); override with ?api=<base>.
const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("api") ?? "";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app container");

const app = new ConsoleApp(
  root,
  new SeeSayClient(baseUrl),
  (url) => new EventSource(url),
);
void app.start();
window.addEventListener("beforeunload", () => app.stop());
