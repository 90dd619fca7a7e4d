"""Command-line programs: ``agentd``, ``netctl`` and ``natsim``.

Exit codes are shared by all three:

    0  success
    1  rpc-error reply (netctl) or failed assertion (natsim)
    2  usage or configuration error
    3  agentd could not bind its listen address
    4  transport failure: connect, TLS, hello or a dropped session
"""

EXIT_OK = 0
EXIT_RPC_ERROR = 1
EXIT_CONFIG = 2
EXIT_BIND = 3
EXIT_TRANSPORT = 4
