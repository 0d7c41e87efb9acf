import { Api } from "./api.js";
import { TeleopClient } from "./session.js";
import { mountUi } from "./ui.js";

const params = new URLSearchParams(window.location.search);
const budget = params.get("budget");

mountUi(new TeleopClient(new Api("")), {
  task: params.get("task") ?? "picking",
  mode: params.get("mode") ?? undefined,
  region: params.get("region") ?? undefined,
  budgetSeconds: budget ? Number(budget) : undefined,
});
