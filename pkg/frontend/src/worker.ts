/** Worker entry point.
 *
 *   node dist/worker.js --stdio          # NDJSON over stdin/stdout (default)
 *   node dist/worker.js --tcp 5555       # NDJSON server on a TCP port
 */

import * as net from "net";
import * as readline from "readline";
import { handleMessage, Send } from "./protocol";

function makeLineHandler(send: Send): (line: string) => void {
  return (line: string) => {
    const text = line.trim();
    if (!text) return;
    let message: Record<string, unknown>;
    try {
      message = JSON.parse(text);
    } catch {
      send({ type: "error", message: "malformed JSON line" });
      return;
    }
    handleMessage(message, send);
  };
}

function serveStdio(): void {
  const send: Send = (message) => {
    process.stdout.write(JSON.stringify(message) + "\n");
  };
  const rl = readline.createInterface({ input: process.stdin, terminal: false });
  rl.on("line", makeLineHandler(send));
  rl.on("close", () => process.exit(0));
}

function serveTcp(port: number): void {
  const server = net.createServer((socket) => {
    const send: Send = (message) => {
      socket.write(JSON.stringify(message) + "\n");
    };
    const rl = readline.createInterface({ input: socket, terminal: false });
    rl.on("line", makeLineHandler(send));
    socket.on("error", () => rl.close());
  });
  server.listen(port, () => {
    process.stderr.write(`worker listening on tcp port ${port}\n`);
  });
}

function main(): void {
  const args = process.argv.slice(2);
  const tcpIndex = args.indexOf("--tcp");
  if (tcpIndex >= 0) {
    const port = parseInt(args[tcpIndex + 1] ?? "", 10);
    if (!Number.isInteger(port) || port <= 0) {
      process.stderr.write("usage: worker --tcp <port> | worker --stdio\n");
      process.exit(2);
    }
    serveTcp(port);
  } else {
    serveStdio();
  }
}

main();
