/* Init-heavy base64 encoder.
 *
 * Simulates an interpreter-style start-up: many allocations, each
 * announced with an allocation marker, before the real work.  The
 * snapshot hypercall sits between init and input delivery, so restored
 * invocations skip the whole init phase (observable as the absence of
 * allocation markers).
 */

#include "virtine.h"

#define INIT_BLOCKS 16
#define INPUT_MAX 4096

static char input[INPUT_MAX];
static char output[((INPUT_MAX + 2) / 3) * 4 + 4];

int main(void)
{
    for (int i = 0; i < INIT_BLOCKS; i++) {
        char *block = balloc(4096);
        memset(block, i + 1, 4096);
        vtimestamp(MARK_ALLOC);
    }

    vsnapshot();

    i64 n = vget_data(input, sizeof(input));
    if (n < 0)
        n = 0;
    unsigned long encoded = base64_encode((const unsigned char *)input,
                                          (unsigned long)n, output);
    vreturn_data(output, encoded);
    return 0;
}
