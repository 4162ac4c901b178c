import { AdminApp } from "./admin.js";
import { ApiClient } from "./api.js";
import { ParticipantApp } from "./participant.js";

export function mount(root: HTMLElement, baseUrl = ""): void {
  const api = new ApiClient(baseUrl);
  if (window.location.hash.startsWith("#/admin")) {
    void new AdminApp(root, api).start();
  } else {
    void new ParticipantApp(root, api).start();
  }
  window.addEventListener("hashchange", () => window.location.reload());
}

const container = document.getElementById("app");
if (container) {
  mount(container);
}
