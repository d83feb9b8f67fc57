/* Boot-cost probe: all the interesting work happens in the shim's
 * milestone hypercalls; the workload itself just leaves. */

#include "virtine.h"

int main(void)
{
    return 0;
}
