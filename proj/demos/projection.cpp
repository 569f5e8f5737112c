#include <cstdio>

int main() {
    std::printf("demo placeholder\n");
    return 0;
}
