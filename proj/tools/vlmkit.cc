#include "vlmkit/cli.h"

int main(int argc, char** argv) { return vlmkit::dispatch(argc, argv); }
