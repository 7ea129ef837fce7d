"""Start the routing daemon in-process and talk to it over a socket."""

import json
import socket
import threading

from prsroute.router import RouterConfig, random_checkpoint
from prsroute.service import RoutingServer, ServiceState
from prsroute.strategy import RoutingPolicy, route

ckpt = random_checkpoint(RouterConfig(vocab_size=100, d=16, K=2, l=4))
policy = RoutingPolicy(alpha=0.5, rho=0.3)
server = RoutingServer(("127.0.0.1", 0), ServiceState(ckpt, policy, hard_admission=True))
threading.Thread(target=server.serve_forever, daemon=True).start()

requests = [{"id": f"p{i}", "tokens": [i, (7 * i) % 100, 42]} for i in range(8)]
requests.append({"id": "bad", "tokens": []})
with socket.create_connection(("127.0.0.1", server.port)) as sock:
    f = sock.makefile("rwb")
    for req in requests + [{"cmd": "stats"}]:
        f.write(json.dumps(req).encode() + b"\n")
        f.flush()
        print(f.readline().decode().strip())

# without admission control the same line comes out of the offline path
print("offline:", route("p0", requests[0]["tokens"], ckpt, policy).to_line())
server.shutdown()
server.server_close()
