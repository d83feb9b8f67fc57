/* Recursive fib: reads n (u32) from guest-physical 0, returns an i64
 * through return_data.  A snapshot point sits before the argument read,
 * so restored invocations skip boot but still see fresh input.
 */

#include "virtine.h"

static i64 fib(i64 n)
{
    return n < 2 ? n : fib(n - 1) + fib(n - 2);
}

int main(void)
{
    volatile u32 *arg = (volatile u32 *)0x0;
    static i64 result;

    vsnapshot();
    result = fib((i64)*arg);
    vreturn_data(&result, sizeof(result));
    return 0;
}
