import { HttpApi } from "./api.js";
import { HubApp } from "./app.js";

new HubApp(document, new HttpApi()).mount();
