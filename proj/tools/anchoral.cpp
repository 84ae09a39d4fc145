// Command-line entry point; the subcommands live in anchoral/commands.hpp.
#include <cstdio>

int main() {
    std::fprintf(stderr, "error: no command given\n");
    return 1;
}
