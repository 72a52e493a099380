#include "pfi/run_io.hpp"

int main(int argc, char** argv) {
    return pfi::run_cli({argv + 1, argv + argc});
}
