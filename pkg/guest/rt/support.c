/* Freestanding support layer: only what the workloads use.
 *
 * Shells hand guests fully zeroed memory, so .bss needs no explicit
 * clearing and the bump allocator starts from a clean heap.
 */

#include "virtine.h"

void *memset(void *dst, int value, unsigned long n)
{
    unsigned char *d = dst;
    while (n--)
        *d++ = (unsigned char)value;
    return dst;
}

void *memcpy(void *dst, const void *src, unsigned long n)
{
    unsigned char *d = dst;
    const unsigned char *s = src;
    while (n--)
        *d++ = *s++;
    return dst;
}

int memcmp(const void *a, const void *b, unsigned long n)
{
    const unsigned char *x = a, *y = b;
    for (; n--; x++, y++)
        if (*x != *y)
            return *x - *y;
    return 0;
}

unsigned long strlen(const char *s)
{
    const char *p = s;
    while (*p)
        p++;
    return (unsigned long)(p - s);
}

unsigned long format_u64(char *dst, u64 value)
{
    char tmp[20];
    unsigned long n = 0, i;
    do {
        tmp[n++] = '0' + (char)(value % 10);
        value /= 10;
    } while (value);
    for (i = 0; i < n; i++)
        dst[i] = tmp[n - 1 - i];
    return n;
}

/* Bump allocator over the zeroed region after the image. */
extern char _heap_start[];
static unsigned long heap_used;

void *balloc(unsigned long n)
{
    void *p = _heap_start + heap_used;
    heap_used += (n + 15) & ~15UL;
    return p;
}

static const char b64_alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

unsigned long base64_encode(const unsigned char *src, unsigned long n, char *dst)
{
    unsigned long i, o = 0;
    for (i = 0; i + 2 < n; i += 3) {
        u32 v = (u32)src[i] << 16 | (u32)src[i + 1] << 8 | src[i + 2];
        dst[o++] = b64_alphabet[(v >> 18) & 63];
        dst[o++] = b64_alphabet[(v >> 12) & 63];
        dst[o++] = b64_alphabet[(v >> 6) & 63];
        dst[o++] = b64_alphabet[v & 63];
    }
    if (i < n) {
        u32 v = (u32)src[i] << 16;
        int two = (i + 1 < n);
        if (two)
            v |= (u32)src[i + 1] << 8;
        dst[o++] = b64_alphabet[(v >> 18) & 63];
        dst[o++] = b64_alphabet[(v >> 12) & 63];
        dst[o++] = two ? b64_alphabet[(v >> 6) & 63] : '=';
        dst[o++] = '=';
    }
    return o;
}
