#include "resvox/ops.hpp"

// Placeholder until the CLI lands; keeps the tool target building while the
// library grows underneath it.
int main() { return 0; }
