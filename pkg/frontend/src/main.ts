import { boot } from "./app.js";

declare global {
  interface Window {
    CONVREC_SERVICE_URL?: string;
  }
}

const params = new URLSearchParams(window.location.search);
const serviceUrl =
  params.get("service") ??
  window.CONVREC_SERVICE_URL ??
  "http://127.0.0.1:8000";

void boot(document, serviceUrl);
