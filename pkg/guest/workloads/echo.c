/* Byte echo over the pre-installed connection (virtine fd 0). */

#include "virtine.h"

static char buf[4096];

int main(void)
{
#ifdef MILESTONES
    vtimestamp(MARK_ENTRY_C);
#endif
    i64 n = vrecv(0, buf, sizeof(buf));
#ifdef MILESTONES
    vtimestamp(MARK_RECV_DONE);
#endif
    if (n > 0)
        vsend(0, buf, (u64)n);
#ifdef MILESTONES
    vtimestamp(MARK_SEND_DONE);
#endif
    return 0;
}
